"""MAP training: negative sampling, per-visit gate draws and Adam updates."""
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import build_popularity
from .encoders import AnalyzerConfig, ContentFeatures
from .errors import ConfigError, ModelError, TrainingError
from .network import MODES, CWHModel, ModelParams, batch_gradients, gate_probability

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    gamma: float = 0.5
    tau: float = 1e-5
    batch_size: int = 32          # positives per batch; each brings `negatives` negatives
    negatives: int = 4
    neg_alpha: float = 0.75
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 60
    patience: int = 5
    seed: int = 0
    mode: str = "cwh"
    d: int = 100
    popularity_mode: str = "constant-half"
    eval_k: int = 20
    unified_ratio: float = 0.9
    analyzers: AnalyzerConfig = field(default_factory=AnalyzerConfig)

    def __post_init__(self):
        if isinstance(self.analyzers, dict):
            self.analyzers = AnalyzerConfig(**self.analyzers)
        self.mode = self.mode.lower().replace("-", "_")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        if self.negatives < 1:
            raise ConfigError("negatives per positive must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.d < 1:
            raise ConfigError("d must be >= 1")

    def to_dict(self):
        out = asdict(self)
        out["analyzers"] = self.analyzers.to_dict()
        return out


class Adam:
    """Adam over a dict of arrays with row-sparse ("lazy") updates.

    ``step`` takes a ``touched`` map from :func:`batch_gradients`: groups
    absent from it are left alone, groups mapped to row indices only update
    those rows (moments included).  Bias correction uses the global step.
    Frozen groups are never updated.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, frozen=()):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.frozen = set(frozen)
        self.m = {k: np.zeros_like(v) for k, v in params.items() if k not in self.frozen}
        self.v = {k: np.zeros_like(v) for k, v in params.items() if k not in self.frozen}
        self.t = 0

    def step(self, params, grads, touched=None):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        if touched is None:
            touched = {k: None for k in self.m}
        for k, rows in touched.items():
            if k in self.frozen:
                continue
            if rows is None:
                m, v, g, p = self.m[k], self.v[k], grads[k], params[k]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            else:
                g = grads[k][rows]
                m = self.beta1 * self.m[k][rows] + (1.0 - self.beta1) * g
                v = self.beta2 * self.v[k][rows] + (1.0 - self.beta2) * g * g
                self.m[k][rows] = m
                self.v[k][rows] = v
                params[k][rows] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class NegativeSampler:
    """Draws non-consumed items from the unigram distribution raised to ``alpha``."""

    def __init__(self, train, alpha=0.75):
        self.n_items = train.n_items
        weights = train.item_counts().astype(float) ** alpha
        if weights.sum() <= 0:
            raise TrainingError("training log has no interactions")
        self.probs = weights / weights.sum()
        self._cdf = np.cumsum(self.probs)
        self._cdf[-1] = 1.0
        self._codes = train.codes
        support = self.probs > 0
        consumed_support = np.bincount(train.users, weights=support[train.items],
                                       minlength=train.n_users)
        self._exhausted = consumed_support >= support.sum()

    def _consumed(self, users, items):
        q = users * self.n_items + items
        pos = np.minimum(np.searchsorted(self._codes, q), len(self._codes) - 1)
        return self._codes[pos] == q

    def sample(self, users, k, rng):
        """``k`` negatives per entry of ``users``; returns an array ``(len(users), k)``."""
        if k < 1:
            raise ValueError("k must be >= 1")
        users = np.asarray(users, dtype=np.int64)
        if np.any(self._exhausted[users]):
            bad = users[self._exhausted[users]][0]
            raise TrainingError(f"user {bad} consumed every sampleable item")
        flat_users = np.repeat(users, k)
        out = np.searchsorted(self._cdf, rng.random(len(flat_users)), side="right")
        todo = np.flatnonzero(self._consumed(flat_users, out))
        while todo.size:
            out[todo] = np.searchsorted(self._cdf, rng.random(todo.size), side="right")
            todo = todo[self._consumed(flat_users[todo], out[todo])]
        return out.reshape(len(users), k)


def sample_negatives(user, k, sampler, rng):
    """``k`` (item, -1) pairs for one user."""
    return [(int(j), -1) for j in sampler.sample([user], k, rng)[0]]


def sample_gates(items, gamma, popularity, rng):
    """One Bernoulli gate per example with success probability ``gamma ** (2 c_j)``."""
    p = gate_probability(gamma, popularity.scores[np.asarray(items, dtype=np.int64)])
    return rng.random(len(items)) < p


def sample_gate_for_example(item, gamma, popularity, rng):
    return int(sample_gates([item], gamma, popularity, rng)[0])


def served_cold_mask(split_cold, gamma, popularity, mode="cwh"):
    """Items scored through the cold path at inference.

    Split-cold items always are.  So is any item whose gate probability is
    exactly one during training: its CF row never received a gradient, so
    the content path is the only trained representation it has (every item
    at ``gamma = 1``).
    """
    mask = np.asarray(split_cold, dtype=bool).copy()
    if mode == "cwh":
        mask |= gate_probability(gamma, popularity.scores) >= 1.0
    return mask


@dataclass
class TrainState:
    params: ModelParams
    optimizer: Adam
    epoch: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0


@dataclass
class EpochStats:
    loss: float
    examples: int
    batches: int
    cold_fraction: float


class Trainer:
    """Holds everything one training run needs."""

    def __init__(self, config, split, catalog, features=None):
        self.config = config
        self.split = split
        self.features = features or ContentFeatures(catalog, config.analyzers)
        self.popularity = build_popularity(split.train, config.popularity_mode)
        self.sampler = NegativeSampler(split.train, config.neg_alpha)
        self.rng = np.random.default_rng(config.seed)
        init_rng = np.random.default_rng([config.seed, 1])
        params = ModelParams.init(split.n_users, split.n_items, config.d, config.analyzers,
                                  self.features.vocab_size, self.features.n_numeric,
                                  mode=config.mode, rng=init_rng,
                                  vocab=self.features.vocab_list)
        self.state = TrainState(params, self._optimizer(params))
        self.cold_mask = served_cold_mask(split.cold_mask(), config.gamma, self.popularity,
                                          config.mode)

    def _optimizer(self, params):
        c = self.config
        return Adam(params.arrays, c.lr, c.beta1, c.beta2, c.eps, frozen=params.frozen())

    def model(self, params=None):
        return CWHModel(params or self.state.params, self.features, self.cold_mask)

    def gates(self, items):
        c = self.config
        if c.mode == "cwh":
            return sample_gates(items, c.gamma, self.popularity, self.rng)
        # ablations: CF-only never uses the cold path; for CB-only both item slots are zero
        return np.zeros(len(items), dtype=bool)

    def train_epoch(self):
        """One shuffled pass over the training positives."""
        c = self.config
        params = self.state.params
        train = self.split.train
        order = self.rng.permutation(len(train))
        total, n_examples, n_batches, n_cold = 0.0, 0, 0, 0
        for start in range(0, len(order), c.batch_size):
            pos = order[start:start + c.batch_size]
            pu, pi = train.users[pos], train.items[pos]
            neg = self.sampler.sample(pu, c.negatives, self.rng)
            users = np.concatenate([pu, np.repeat(pu, c.negatives)])
            items = np.concatenate([pi, neg.ravel()])
            ys = np.concatenate([np.ones(len(pu)), -np.ones(neg.size)])
            gates = self.gates(items)
            try:
                loss, grads, touched = batch_gradients(params, self.features.rows(items), users,
                                                       items, ys, gates, c.tau)
            except ModelError as exc:
                raise TrainingError(f"epoch {self.state.epoch + 1}, batch {n_batches}: {exc}") from exc
            self.state.optimizer.step(params.arrays, grads, touched)
            total += loss * len(items)
            n_examples += len(items)
            n_batches += 1
            n_cold += int(gates.sum())
        self.state.epoch += 1
        mean = total / max(n_examples, 1)
        if not np.isfinite(mean):
            raise TrainingError(f"non-finite epoch loss at epoch {self.state.epoch}")
        return EpochStats(mean, n_examples, n_batches, n_cold / max(n_examples, 1))

    def validate(self):
        from .evaluator import validation_mrr
        return validation_mrr(self.model(), self.split, k=self.config.eval_k,
                              unified_ratio=self.config.unified_ratio,
                              include_cold=self.config.mode != "cf_only")

    def train(self, progress=None):
        """Early-stopped training; returns ``(best_params, report_rows)``.

        Validation unified MRR@K is measured before the first epoch and after
        every epoch; training stops after ``patience`` consecutive epochs
        without improvement.
        """
        c = self.config
        if not len(self.split.val_warm) and not len(self.split.val_cold):
            raise TrainingError("split has no validation pairs")
        state = self.state
        metrics = self.validate()
        rows = [{"epoch": 0, "train_loss": "", **_report_metrics(metrics, c.eval_k)}]
        state.best_metric = metrics["unified"]
        state.best_epoch = 0
        best = state.params.copy()
        stale = 0
        for _ in range(c.max_epochs):
            t0 = time.perf_counter()
            stats = self.train_epoch()
            metrics = self.validate()
            rows.append({"epoch": state.epoch, "train_loss": stats.loss,
                         **_report_metrics(metrics, c.eval_k)})
            if progress:
                progress(state.epoch, stats, metrics, time.perf_counter() - t0)
            if metrics["unified"] > state.best_metric:
                state.best_metric = metrics["unified"]
                state.best_epoch = state.epoch
                best = state.params.copy()
                stale = 0
            else:
                stale += 1
                if stale > c.patience:
                    break
        if state.best_epoch == 0:
            log.warning("validation metric never improved; returning initial parameters")
        return best, rows


def _report_metrics(metrics, k):
    return {f"val_mrr{k}_warm": metrics.get("warm", float("nan")),
            f"val_mrr{k}_cold": metrics.get("cold", float("nan")),
            f"val_mrr{k}_unified": metrics["unified"]}


def train(config, split, catalog, features=None, progress=None):
    """Train a model; returns ``(CWHModel with best params, report rows)``."""
    trainer = Trainer(config, split, catalog, features)
    params, rows = trainer.train(progress)
    return trainer.model(params), rows
