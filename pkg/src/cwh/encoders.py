"""Content analyzers and the multiview concatenation.

Every analyzer is linear in its parameters once the raw content has been
turned into a fixed design row:

* ``tags``    -- mean (or sum) of learned tag embeddings; design row holds
  ``1/n`` at each known tag's vocabulary index.
* ``text``    -- lowercase alphanumeric tokens, truncated, hashed into
  ``hash_dim`` buckets, L2-normalized, then projected by a learned matrix.
* ``numeric`` -- learned affine map of the numeric field (zero padded).

Design rows depend only on content and config, so they are built once per
catalog (:class:`ContentFeatures`) and the encoders reduce to sparse
products during training.
"""
import re
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ModelError

ANALYZERS = ("tags", "text", "numeric")
_TOKEN = re.compile(r"[a-z0-9]+")


@dataclass
class AnalyzerConfig:
    active: tuple = ("tags", "text")
    dims: dict = field(default_factory=lambda: {"tags": 100, "text": 100, "numeric": 100})
    hash_dim: int = 4096
    max_tokens: int = 512
    tag_aggregation: str = "mean"

    def __post_init__(self):
        self.active = tuple(a for a in ANALYZERS if a in set(self.active))
        unknown = set(self.dims) - set(ANALYZERS)
        if unknown:
            raise ConfigError(f"unknown analyzers: {sorted(unknown)}")
        for a in self.active:
            if int(self.dims.get(a, 0)) <= 0:
                raise ConfigError(f"analyzer {a!r} needs a positive dimension")
        if self.hash_dim <= 0 or self.max_tokens <= 0:
            raise ConfigError("hash_dim and max_tokens must be positive")
        if self.tag_aggregation not in ("mean", "sum"):
            raise ConfigError("tag_aggregation must be 'mean' or 'sum'")

    @property
    def d_phi(self):
        return sum(int(self.dims[a]) for a in self.active)

    def slices(self):
        """Column slice of each active analyzer inside the multiview vector."""
        out, start = {}, 0
        for a in self.active:
            out[a] = slice(start, start + int(self.dims[a]))
            start += int(self.dims[a])
        return out

    def to_dict(self):
        return {"active": list(self.active), "dims": {k: int(v) for k, v in self.dims.items()},
                "hash_dim": self.hash_dim, "max_tokens": self.max_tokens,
                "tag_aggregation": self.tag_aggregation}


def tokenize(text, max_tokens=512):
    return _TOKEN.findall(text.lower())[:max_tokens]


def token_bucket(token, hash_dim):
    # crc32 rather than hash(): str hashing is salted per process
    return zlib.crc32(token.encode("utf-8")) % hash_dim


def hashed_bag(text, hash_dim, max_tokens=512):
    """L2-normalized bucket counts of the tokens of ``text`` (dense)."""
    x = np.zeros(hash_dim)
    for tok in tokenize(text, max_tokens):
        x[token_bucket(tok, hash_dim)] += 1.0
    norm = np.linalg.norm(x)
    return x / norm if norm > 0 else x


def encode_tags(tags, table, vocab, aggregation="mean"):
    """Aggregate the embeddings of the known tags; zero vector if none known."""
    rows = [vocab[t] for t in sorted(tags) if t in vocab]
    if not rows:
        return np.zeros(table.shape[1])
    total = table[rows].sum(axis=0)
    return total / len(rows) if aggregation == "mean" else total


def encode_text(text, projection, max_tokens=512):
    return hashed_bag(text, projection.shape[0], max_tokens) @ projection


def encode_numeric(values, weight, bias):
    x = np.zeros(weight.shape[1])
    values = np.asarray(values, dtype=float)[:weight.shape[1]]
    x[:len(values)] = values
    return weight @ x + bias


def concat_multiview(parts, dims=None):
    """Concatenate analyzer outputs in their declared order."""
    parts = [np.asarray(p, dtype=float).ravel() for p in parts]
    if dims is not None:
        got = [len(p) for p in parts]
        if got != [int(d) for d in dims]:
            raise ModelError(f"multiview part dims {got} do not match config {list(dims)}")
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class ItemInputs:
    """Design rows for a batch of items, one entry per active analyzer."""
    tags: object = None       # csr (n x vocab)
    text: object = None       # csr (n x hash_dim)
    numeric: object = None    # dense (n x n_numeric)
    n: int = None             # row count, needed when no analyzer is active

    def __len__(self):
        for x in (self.tags, self.text, self.numeric):
            if x is not None:
                return x.shape[0]
        return self.n or 0


class ContentFeatures:
    """Fixed design matrices of a catalog for a given analyzer config."""

    def __init__(self, catalog, config, vocab=None, n_numeric=None):
        self.config = config
        if vocab is None:
            vocab = sorted({t for b in catalog for t in b.tags})
        self.vocab_list = list(vocab)
        self.vocab = {t: k for k, t in enumerate(self.vocab_list)}
        if n_numeric is None:
            n_numeric = max((len(b.numeric) for b in catalog), default=0)
        self.n_numeric = int(n_numeric)
        self.n_items = len(catalog)
        self._all = self.transform(catalog)

    def _tag_rows(self, bundles):
        indptr, indices, data = [0], [], []
        for b in bundles:
            cols = sorted({self.vocab[t] for t in b.tags if t in self.vocab})
            w = 1.0 / len(cols) if cols and self.config.tag_aggregation == "mean" else 1.0
            indices += cols
            data += [w] * len(cols)
            indptr.append(len(indices))
        return sp.csr_matrix((np.array(data, dtype=float), np.array(indices, dtype=np.int64),
                              np.array(indptr, dtype=np.int64)),
                             shape=(len(bundles), max(len(self.vocab_list), 1)))

    def _text_rows(self, bundles):
        h = self.config.hash_dim
        indptr, indices, data = [0], [], []
        for b in bundles:
            counts = {}
            for tok in tokenize(b.text, self.config.max_tokens):
                k = token_bucket(tok, h)
                counts[k] = counts.get(k, 0.0) + 1.0
            cols = sorted(counts)
            vals = np.array([counts[c] for c in cols], dtype=float)
            if len(vals):
                vals /= np.linalg.norm(vals)
            indices += cols
            data += vals.tolist()
            indptr.append(len(indices))
        return sp.csr_matrix((np.array(data, dtype=float), np.array(indices, dtype=np.int64),
                              np.array(indptr, dtype=np.int64)), shape=(len(bundles), h))

    def _numeric_rows(self, bundles):
        x = np.zeros((len(bundles), self.n_numeric))
        for r, b in enumerate(bundles):
            vals = b.numeric[:self.n_numeric]
            x[r, :len(vals)] = vals
        return x

    def transform(self, bundles):
        """Design rows for arbitrary bundles (e.g. brand-new cold items)."""
        active = self.config.active
        return ItemInputs(
            tags=self._tag_rows(bundles) if "tags" in active else None,
            text=self._text_rows(bundles) if "text" in active else None,
            numeric=self._numeric_rows(bundles) if "numeric" in active else None,
            n=len(bundles))

    def rows(self, items):
        items = np.asarray(items, dtype=np.int64)
        a = self._all
        return ItemInputs(
            tags=a.tags[items] if a.tags is not None else None,
            text=a.text[items] if a.text is not None else None,
            numeric=a.numeric[items] if a.numeric is not None else None,
            n=len(items))

    def all_rows(self):
        return self._all

    @property
    def vocab_size(self):
        return max(len(self.vocab_list), 1)


def encoder_param_shapes(config, vocab_size, n_numeric):
    shapes = {}
    if "tags" in config.active:
        shapes["tags.E"] = (vocab_size, int(config.dims["tags"]))
    if "text" in config.active:
        shapes["text.P"] = (config.hash_dim, int(config.dims["text"]))
    if "numeric" in config.active:
        shapes["numeric.W"] = (int(config.dims["numeric"]), n_numeric)
        shapes["numeric.b"] = (int(config.dims["numeric"]),)
    return shapes


def encode_batch(params, inputs, config):
    """Multiview vectors ``f`` for a batch (rows of ``inputs``)."""
    parts = []
    if "tags" in config.active:
        parts.append(np.asarray(inputs.tags @ params["tags.E"]))
    if "text" in config.active:
        parts.append(np.asarray(inputs.text @ params["text.P"]))
    if "numeric" in config.active:
        parts.append(inputs.numeric @ params["numeric.W"].T + params["numeric.b"])
    if not parts:
        return np.zeros((len(inputs), 0))
    return np.hstack(parts)


def encode_backward(grad_f, inputs, config, grads):
    """Accumulate encoder gradients into ``grads`` given dLoss/df."""
    sl = config.slices()
    if "tags" in config.active:
        grads["tags.E"] += np.asarray(inputs.tags.T @ grad_f[:, sl["tags"]])
    if "text" in config.active:
        grads["text.P"] += np.asarray(inputs.text.T @ grad_f[:, sl["text"]])
    if "numeric" in config.active:
        g = grad_f[:, sl["numeric"]]
        grads["numeric.W"] += g.T @ inputs.numeric
        grads["numeric.b"] += g.sum(axis=0)
