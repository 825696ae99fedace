"""Gated hybrid scoring network with a hand-written backward pass.

Item side: the multiview content vector ``f`` goes through two
single-hidden-layer ReLU networks with identical shapes, ``phi`` (content
representation) and ``cold`` (compensation for a missing CF vector).  The
cold item vector is ``m + cold(f)``.  A binary gate ``b`` picks which
vector fills the CF slot of the scorer:

    q0 = [v_eff, phi]      q1 = relu(W0 q0 + r0)
    h0 = [u, q1]           h1 = relu(W1 h0 + r1)
    s  = W2 h1 + r2

and ``p(y | ...) = sigmoid(y * s)``.
"""
import io
import json
import zipfile

import numpy as np

from .encoders import (AnalyzerConfig, ContentFeatures, encode_backward, encode_batch,
                       encoder_param_shapes)
from .errors import ModelError

MODES = ("cwh", "cf_only", "cb_only")
CHECKPOINT_VERSION = 1

_NET_KEYS = ("W_h", "b_h", "W_o", "b_o")
_SCORER_KEYS = ("W0", "r0", "W1", "r1", "W2", "r2")


def frozen_groups(mode, names):
    """Parameter groups held at zero and never updated in an ablation mode."""
    if mode == "cf_only":
        return {n for n in names if n == "m" or n.startswith(("phi.", "cold.", "tags.", "text.",
                                                              "numeric."))}
    if mode == "cb_only":
        return {n for n in names if n in ("V", "m") or n.startswith("cold.")}
    return set()


class ModelParams:
    """Named parameter arrays plus the dimensions needed to interpret them."""

    def __init__(self, arrays, d, analyzers, mode="cwh", vocab=(), n_numeric=0):
        self.arrays = dict(arrays)
        self.d = int(d)
        self.analyzers = analyzers
        self.mode = mode
        self.vocab = list(vocab)
        self.n_numeric = int(n_numeric)

    @classmethod
    def init(cls, n_users, n_items, d, analyzers, vocab_size, n_numeric=0, mode="cwh",
             rng=None, vocab=()):
        if mode not in MODES:
            raise ModelError(f"unknown mode {mode!r}")
        rng = np.random.default_rng(rng)
        d_phi = analyzers.d_phi

        def unif(shape, fan_in):
            lim = 1.0 / np.sqrt(max(fan_in, 1))
            return rng.uniform(-lim, lim, size=shape)

        arrays = {
            "U": rng.normal(0.0, 0.1, size=(n_users, d)),
            "V": rng.normal(0.0, 0.1, size=(n_items, d)),
            "m": rng.normal(0.0, 0.1, size=d),
        }
        for name, shape in encoder_param_shapes(analyzers, vocab_size, n_numeric).items():
            if name == "numeric.b":
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = unif(shape, int(analyzers.dims[name.split(".")[0]]))
        for net in ("phi", "cold"):
            arrays[f"{net}.W_h"] = unif((d, d_phi), d_phi)
            arrays[f"{net}.b_h"] = np.zeros(d)
            arrays[f"{net}.W_o"] = unif((d, d), d)
            arrays[f"{net}.b_o"] = np.zeros(d)
        arrays["s.W0"] = unif((d, 2 * d), 2 * d)
        arrays["s.r0"] = np.zeros(d)
        arrays["s.W1"] = unif((d, 2 * d), 2 * d)
        arrays["s.r1"] = np.zeros(d)
        arrays["s.W2"] = unif((1, d), d)
        arrays["s.r2"] = np.zeros(1)
        for name in frozen_groups(mode, arrays):
            arrays[name] = np.zeros_like(arrays[name])
        return cls(arrays, d, analyzers, mode, vocab, n_numeric)

    def __getitem__(self, key):
        return self.arrays[key]

    def __setitem__(self, key, value):
        self.arrays[key] = value

    def __contains__(self, key):
        return key in self.arrays

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.d,
                           self.analyzers, self.mode, self.vocab, self.n_numeric)

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def net(self, prefix):
        return {k: self.arrays[f"{prefix}.{k}"] for k in _NET_KEYS}

    def scorer(self):
        return {k: self.arrays[f"s.{k}"] for k in _SCORER_KEYS}

    def sq_norm(self):
        """Sum of squared norms of every parameter group (the Gaussian prior)."""
        return float(sum(np.vdot(v, v) for v in self.arrays.values()))

    def frozen(self):
        return frozen_groups(self.mode, self.arrays)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())
                and self.mode == other.mode and self.d == other.d)


def relu(x):
    return np.maximum(x, 0.0)


def _check_finite(x, layer):
    if not np.all(np.isfinite(x)):
        raise ModelError(f"non-finite values in {layer}")
    return x


def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def sigmoid(z):
    return np.exp(log_sigmoid(z))


def multiview_encode(f, net):
    """One-hidden-layer ReLU network ``W_o relu(W_h f + b_h) + b_o``."""
    f = _check_finite(np.asarray(f, dtype=float), "multiview input")
    hidden = relu(net["W_h"] @ f + net["b_h"])
    return net["W_o"] @ hidden + net["b_o"]


def cold_compensate(f, cold_net, m):
    return m + multiview_encode(f, cold_net)


def gate_probability(gamma, c):
    """Probability ``gamma ** (2c)`` of routing an item through the cold path.

    ``gamma = 0`` always gives 0, including at ``c = 0``.
    """
    g = np.asarray(gamma, dtype=float)
    c = np.asarray(c, dtype=float)
    if np.any((g < 0) | (g > 1)) or np.any((c < 0) | (c > 1)):
        raise ValueError("gamma and c must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        p = np.where(g == 0.0, 0.0, np.power(g, 2.0 * c))
    return float(p) if p.ndim == 0 else p


def effective_item_vector(b, v, v_cold):
    if b not in (0, 1, True, False):
        raise ValueError("gate must be 0 or 1")
    return v_cold if b else v


def score(u, v_eff, phi, scorer):
    q0 = np.concatenate([v_eff, phi])
    q1 = _check_finite(relu(scorer["W0"] @ q0 + scorer["r0"]), "item layer q1")
    h0 = np.concatenate([u, q1])
    h1 = _check_finite(relu(scorer["W1"] @ h0 + scorer["r1"]), "user-item layer h1")
    s = scorer["W2"] @ h1 + scorer["r2"]
    return float(_check_finite(s, "output")[0])


def likelihood(y, s):
    """``sigmoid(y * s)`` for ``y`` in {+1, -1}."""
    return float(sigmoid(y * s))


def base_likelihood(y, u, v, phi, scorer):
    return likelihood(y, score(u, v, phi, scorer))


def gated_likelihood(y, u, v, v_cold, b, phi, scorer):
    return likelihood(y, score(u, effective_item_vector(b, v, v_cold), phi, scorer))


# ---------------------------------------------------------------- batched path

def _mlp_forward(x, net):
    a = x @ net["W_h"].T + net["b_h"]
    z = relu(a)
    return z @ net["W_o"].T + net["b_o"], (x, a, z)


def _mlp_backward(g_out, cache, net, grads, prefix):
    x, a, z = cache
    grads[f"{prefix}.W_o"] += g_out.T @ z
    grads[f"{prefix}.b_o"] += g_out.sum(axis=0)
    da = (g_out @ net["W_o"]) * (a > 0)
    grads[f"{prefix}.W_h"] += da.T @ x
    grads[f"{prefix}.b_h"] += da.sum(axis=0)
    return da @ net["W_h"]


def _nll_backward(params, inputs, users, items, ys, gates):
    """Mean negative log-likelihood, its gradients, and the rows it reaches.

    ``touched`` maps a group name to ``None`` (whole group on the path) or an
    array of row indices; groups off the computational path are absent.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ys = np.asarray(ys, dtype=float)
    gates = np.asarray(gates, dtype=bool)
    n = len(users)
    d = params.d
    cfg = params.analyzers

    f = encode_batch(params, inputs, cfg)
    phi, phi_cache = _mlp_forward(f, params.net("phi"))
    cold_rows = np.flatnonzero(gates)
    warm_rows = np.flatnonzero(~gates)
    v_eff = params["V"][items]
    if cold_rows.size:
        comp, cold_cache = _mlp_forward(f[cold_rows], params.net("cold"))
        v_eff[cold_rows] = params["m"] + comp
    sc = params.scorer()
    q0 = np.hstack([v_eff, phi])
    a_q = q0 @ sc["W0"].T + sc["r0"]
    q1 = relu(a_q)
    h0 = np.hstack([params["U"][users], q1])
    a_h = h0 @ sc["W1"].T + sc["r1"]
    h1 = relu(a_h)
    s = h1 @ sc["W2"][0] + sc["r2"][0]
    z = ys * s
    nll = float(-log_sigmoid(z).mean())

    g = params.zeros_like()
    touched = {k: None for k in params.keys()
               if k.startswith(("s.", "phi.", "numeric."))}
    g_s = -ys * sigmoid(-z) / n
    g["s.W2"] += (g_s @ h1)[None, :]
    g["s.r2"] += g_s.sum()
    da_h = np.outer(g_s, sc["W2"][0]) * (a_h > 0)
    g["s.W1"] += da_h.T @ h0
    g["s.r1"] += da_h.sum(axis=0)
    dh0 = da_h @ sc["W1"]
    np.add.at(g["U"], users, dh0[:, :d])
    touched["U"] = np.unique(users)
    da_q = dh0[:, d:] * (a_q > 0)
    g["s.W0"] += da_q.T @ q0
    g["s.r0"] += da_q.sum(axis=0)
    dq0 = da_q @ sc["W0"]
    dv = dq0[:, :d]
    if warm_rows.size:
        np.add.at(g["V"], items[warm_rows], dv[warm_rows])
        touched["V"] = np.unique(items[warm_rows])
    df = _mlp_backward(dq0[:, d:], phi_cache, params.net("phi"), g, "phi")
    if cold_rows.size:
        g["m"] += dv[cold_rows].sum(axis=0)
        df[cold_rows] += _mlp_backward(dv[cold_rows], cold_cache, params.net("cold"), g, "cold")
        touched["m"] = None
        touched.update({f"cold.{k}": None for k in _NET_KEYS})
    encode_backward(df, inputs, cfg, g)
    if "tags" in cfg.active:
        touched["tags.E"] = np.unique(inputs.tags.indices)
    if "text" in cfg.active:
        touched["text.P"] = np.unique(inputs.text.indices)
    return nll, g, touched


def _check_grads(g, touched=None):
    """Raise on non-finite gradients, looking only at ``touched`` rows if given."""
    keys = g.keys() if touched is None else touched.keys()
    for k in keys:
        v = g[k] if touched is None or touched[k] is None else g[k][touched[k]]
        if not np.all(np.isfinite(v)):
            raise ModelError(f"non-finite gradient for {k}")


def forward_backward(params, inputs, users, items, ys, gates, tau=0.0, grad=True):
    """Loss and gradients for a batch of labelled, gated examples.

    ``inputs`` holds the content design rows of ``items``.  The loss is the
    mean over examples of ``-log sigmoid(y s) + tau/2 * ||Theta||^2`` with the
    prior over every parameter group.  Off-path groups (the cold network and
    ``m`` when ``b = 0``, the item's ``V`` row when ``b = 1``) receive only
    the prior term.  Returns ``(loss, grads)``; ``grads`` is None when
    ``grad`` is false.
    """
    if not grad:
        nll = float(example_losses(params, inputs, users, items, ys, gates).mean())
        loss = nll + 0.5 * tau * params.sq_norm()
        if not np.isfinite(loss):
            raise ModelError("non-finite loss")
        return loss, None
    nll, g, _ = _nll_backward(params, inputs, users, items, ys, gates)
    loss = nll + 0.5 * tau * params.sq_norm()
    if not np.isfinite(loss):
        raise ModelError("non-finite loss")
    if tau:
        for k, v in params.items():
            g[k] += tau * v
    _check_grads(g)
    return loss, g


def batch_gradients(params, inputs, users, items, ys, gates, tau=0.0):
    """Training gradient with the prior restricted to what the batch reaches.

    The Gaussian prior is applied to whole groups on the path and to the
    touched rows of the embedding tables (``U``, ``V``, tag and text
    tables).  Returns ``(loss, grads, touched)`` where ``loss`` is the mean
    NLL plus the applied prior.
    """
    nll, g, touched = _nll_backward(params, inputs, users, items, ys, gates)
    prior = 0.0
    if tau:
        for k, rows in touched.items():
            v = params[k]
            if rows is None:
                g[k] += tau * v
                prior += float(np.vdot(v, v))
            else:
                g[k][rows] += tau * v[rows]
                prior += float(np.vdot(v[rows], v[rows]))
    loss = nll + 0.5 * tau * prior
    if not np.isfinite(loss):
        raise ModelError("non-finite loss")
    _check_grads(g, touched)
    return loss, g, touched


def example_losses(params, inputs, users, items, ys, gates):
    """Per-example negative log-likelihood (no prior)."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    gates = np.asarray(gates, dtype=bool)
    f = encode_batch(params, inputs, params.analyzers)
    phi, _ = _mlp_forward(f, params.net("phi"))
    v_eff = params["V"][items]
    rows = np.flatnonzero(gates)
    if rows.size:
        v_eff[rows] = params["m"] + _mlp_forward(f[rows], params.net("cold"))[0]
    sc = params.scorer()
    q1 = relu(np.hstack([v_eff, phi]) @ sc["W0"].T + sc["r0"])
    h1 = relu(np.hstack([params["U"][users], q1]) @ sc["W1"].T + sc["r1"])
    s = h1 @ sc["W2"][0] + sc["r2"][0]
    return -log_sigmoid(np.asarray(ys, dtype=float) * s)


class CWHModel:
    """Trained parameters bound to a catalog's content features.

    ``cold_mask`` marks items served through the cold path by default (those
    without training interactions).
    """

    def __init__(self, params, features, cold_mask=None):
        self.params = params
        self.features = features
        n_items = features.n_items
        self.cold_mask = (np.zeros(n_items, dtype=bool) if cold_mask is None
                          else np.asarray(cold_mask, dtype=bool))

    @property
    def mode(self):
        return self.params.mode

    @property
    def n_items(self):
        return self.features.n_items

    def supports_cold(self):
        return self.mode != "cf_only"

    def _f(self, inputs):
        return encode_batch(self.params, inputs, self.params.analyzers)[0]

    def predict(self, user, item, is_cold=None):
        if not 0 <= item < self.n_items:
            raise ModelError(f"item {item} is outside the catalog")
        if is_cold is None:
            is_cold = bool(self.cold_mask[item])
        f = self._f(self.features.rows([item]))
        if is_cold:
            return self._predict_cold(user, f)
        p = self.params
        return score(p["U"][user], p["V"][item], multiview_encode(f, p.net("phi")), p.scorer())

    def predict_content(self, user, bundle):
        """Score a brand-new item from its content alone."""
        return self._predict_cold(user, self._f(self.features.transform([bundle])))

    def _predict_cold(self, user, f):
        if not self.supports_cold():
            raise ModelError("CF-only model has no content path and cannot score cold items")
        p = self.params
        v_cold = cold_compensate(f, p.net("cold"), p["m"])
        return score(p["U"][user], v_cold, multiview_encode(f, p.net("phi")), p.scorer())

    def excluded_candidates(self):
        """Items that can never be recommended: cold items of a CF-only model."""
        if self.supports_cold():
            return np.zeros(self.n_items, dtype=bool)
        return self.cold_mask.copy()

    def item_layer(self, cold_mask=None):
        """``q1`` for every catalog item, cold items through the cold path."""
        cold_mask = self.cold_mask if cold_mask is None else cold_mask
        p = self.params
        f = encode_batch(p, self.features.all_rows(), p.analyzers)
        phi, _ = _mlp_forward(f, p.net("phi"))
        v_eff = p["V"].copy()
        rows = np.flatnonzero(cold_mask) if self.supports_cold() else np.zeros(0, dtype=int)
        if rows.size:
            v_eff[rows] = p["m"] + _mlp_forward(f[rows], p.net("cold"))[0]
        sc = p.scorer()
        return relu(np.hstack([v_eff, phi]) @ sc["W0"].T + sc["r0"])

    def score_users(self, users, q1=None, chunk_elems=4_000_000):
        """Score matrix ``len(users) x n_items`` for full-catalog ranking."""
        users = np.asarray(users, dtype=np.int64)
        p = self.params
        d = p.d
        if q1 is None:
            q1 = self.item_layer()
        sc = p.scorer()
        item_part = q1 @ sc["W1"][:, d:].T + sc["r1"]
        user_part = p["U"][users] @ sc["W1"][:, :d].T
        w2, r2 = sc["W2"][0], sc["r2"][0]
        out = np.empty((len(users), q1.shape[0]))
        step = max(1, chunk_elems // max(q1.shape[0] * d, 1))
        for start in range(0, len(users), step):
            block = user_part[start:start + step, None, :] + item_part[None, :, :]
            np.maximum(block, 0.0, out=block)
            out[start:start + step] = block @ w2 + r2
        return out


# ---------------------------------------------------------------- checkpoints

def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, params, extra=None):
    """Write every parameter group to an ``.npz``-compatible zip.

    Entry timestamps are fixed so identical parameters give identical bytes.
    """
    meta = {"version": CHECKPOINT_VERSION, "d": params.d, "mode": params.mode,
            "analyzers": params.analyzers.to_dict(), "vocab": params.vocab,
            "n_numeric": params.n_numeric,
            "shapes": {k: list(v.shape) for k, v in sorted(params.items())},
            "extra": extra or {}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True))
        for k in sorted(params.keys()):
            info = zipfile.ZipInfo(f"{k}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, _npy_bytes(params[k]))


def load_checkpoint(path):
    """Returns ``(params, extra)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {}
        for k, shape in meta["shapes"].items():
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"{k}.npy")), allow_pickle=False)
            if list(arr.shape) != shape:
                raise ModelError(f"checkpoint shape mismatch for {k}")
            arrays[k] = arr
    a = meta["analyzers"]
    analyzers = AnalyzerConfig(active=tuple(a["active"]), dims=a["dims"], hash_dim=a["hash_dim"],
                               max_tokens=a["max_tokens"], tag_aggregation=a["tag_aggregation"])
    params = ModelParams(arrays, meta["d"], analyzers, meta["mode"], meta["vocab"],
                         meta["n_numeric"])
    return params, meta["extra"]


def build_model(params, catalog, cold_mask=None):
    """Bind parameters to a catalog, reusing the checkpoint's tag vocabulary."""
    features = ContentFeatures(catalog, params.analyzers, vocab=params.vocab or None,
                               n_numeric=params.n_numeric)
    return CWHModel(params, features, cold_mask)
