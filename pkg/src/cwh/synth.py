"""Synthetic catalog whose latent item factors are partly determined by content.

Each item carries a few tags.  Its latent factor is

    v_j = beta * content_j + (1 - beta) * noise_j

where ``content_j`` is the (rescaled) mean of its tags' latent vectors, so
``beta`` sets how much of an item's taste profile is recoverable from content.
Users draw items without replacement from ``softmax(a * u.v / sqrt(k) + pop)``
where ``pop`` is a Zipf-like log bias over a random (content-independent)
popularity ranking.
"""
from dataclasses import dataclass

import numpy as np

from .data import ContentBundle, InteractionLog
from .errors import ConfigError, DataError


@dataclass
class SynthConfig:
    n_users: int = 2000
    n_items: int = 1000
    latent_dim: int = 4
    n_tags: int = 50
    tags_per_item: int = 4
    beta: float = 0.9
    interactions_per_user: int = 20
    popularity_skew: float = 0.5
    affinity_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        for name in ("n_users", "n_items", "latent_dim", "n_tags", "tags_per_item"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.tags_per_item > self.n_tags:
            raise ConfigError("tags_per_item exceeds the tag vocabulary")
        if self.popularity_skew < 0:
            raise ConfigError("popularity_skew must be >= 0")


@dataclass
class SynthDataset:
    log: InteractionLog
    catalog: list
    user_factors: np.ndarray
    item_factors: np.ndarray
    tag_vectors: np.ndarray
    item_tags: np.ndarray
    popularity_bias: np.ndarray


def tag_name(k):
    return f"t{k:04d}"


def generate(config):
    c = config
    if c.interactions_per_user <= 0 or c.interactions_per_user > c.n_items:
        raise DataError("interactions_per_user must lie in [1, n_items]")
    rng = np.random.default_rng(c.seed)
    tag_vectors = rng.normal(size=(c.n_tags, c.latent_dim))
    item_tags = np.sort(np.argsort(rng.random((c.n_items, c.n_tags)), axis=1)[:, :c.tags_per_item],
                        axis=1)
    content = tag_vectors[item_tags].mean(axis=1) * np.sqrt(c.tags_per_item)
    noise = rng.normal(size=(c.n_items, c.latent_dim))
    item_factors = c.beta * content + (1.0 - c.beta) * noise
    user_factors = rng.normal(size=(c.n_users, c.latent_dim))
    pop_rank = rng.permutation(c.n_items)
    pop_bias = -c.popularity_skew * np.log1p(pop_rank)

    logits = c.affinity_scale * (user_factors @ item_factors.T) / np.sqrt(c.latent_dim) + pop_bias
    # Gumbel top-k = sampling without replacement from the softmax
    perturbed = logits + rng.gumbel(size=logits.shape)
    k = c.interactions_per_user
    chosen = np.argpartition(-perturbed, k - 1, axis=1)[:, :k]
    users = np.repeat(np.arange(c.n_users), k)
    log = InteractionLog.from_pairs(users, chosen.ravel(), c.n_users, c.n_items,
                                    user_labels=[str(i) for i in range(c.n_users)],
                                    item_labels=[str(j) for j in range(c.n_items)])
    if not len(log):
        raise DataError("synthetic config produced no interactions")
    catalog = []
    for tags in item_tags:
        names = [tag_name(t) for t in tags]
        catalog.append(ContentBundle(frozenset(names), " ".join(names), ()))
    return SynthDataset(log, catalog, user_factors, item_factors, tag_vectors, item_tags, pop_bias)
