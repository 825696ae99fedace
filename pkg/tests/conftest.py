import numpy as np
import pytest

from cwh.encoders import AnalyzerConfig, ContentFeatures
from cwh.splitter import make_split
from cwh.synth import SynthConfig, generate


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(n_users=120, n_items=80, n_tags=20, latent_dim=4,
                                interactions_per_user=12, seed=3))


@pytest.fixture(scope="session")
def small_split(small_synth):
    return make_split(small_synth.log, offset=2, seed=5)


@pytest.fixture(scope="session")
def tag_config():
    return AnalyzerConfig(active=("tags",), dims={"tags": 8})


@pytest.fixture(scope="session")
def small_features(small_synth, tag_config):
    return ContentFeatures(small_synth.catalog, tag_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(rng, d=8, dk=8, n_users=3, mode="cwh"):
    """A model with every analyzer active and small dimensions, plus its features."""
    from cwh.data import ContentBundle
    from cwh.network import ModelParams
    catalog = [ContentBundle(frozenset({"a", "b"}), "red fox", (0.5, -1.0)),
               ContentBundle(frozenset({"c"}), "blue", (2.0,)),
               ContentBundle(frozenset({"a", "d", "e"}), "", (0.1, 0.3))]
    cfg = AnalyzerConfig(active=("tags", "text", "numeric"),
                         dims={"tags": dk, "text": dk, "numeric": dk}, hash_dim=16)
    feats = ContentFeatures(catalog, cfg)
    params = ModelParams.init(n_users, len(catalog), d, cfg, feats.vocab_size, feats.n_numeric,
                              mode=mode, rng=rng)
    # non-zero biases so their gradients are exercised away from the init point
    for k, v in params.items():
        if v.ndim == 1:
            params[k] = v + rng.normal(0, 0.1, size=v.shape)
    return params, feats


def fd_relative_errors(params, inputs, users, items, ys, gates, tau=0.0, h=1e-4):
    """Max entrywise relative error of analytic vs central-difference gradients per group."""
    from cwh.network import forward_backward
    _, grads = forward_backward(params, inputs, users, items, ys, gates, tau)
    out = {}
    for name, arr in params.items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up, _ = forward_backward(params, inputs, users, items, ys, gates, tau, grad=False)
            arr[idx] = old - h
            down, _ = forward_backward(params, inputs, users, items, ys, gates, tau, grad=False)
            arr[idx] = old
            num[idx] = (up - down) / (2 * h)
        g = grads[name]
        rel = np.abs(g - num) / np.maximum(np.abs(g) + np.abs(num), 1e-6)
        out[name] = float(rel.max()) if rel.size else 0.0
    return out


def relu_margin(params, inputs, users, items, gates):
    """Smallest |pre-activation| over every ReLU the batch passes through.

    Central differences are only meaningful away from the ReLU kink, so
    gradient-check instances are drawn with a margin well above the step.
    """
    from cwh.encoders import encode_batch
    f = encode_batch(params, inputs, params.analyzers)
    pre = []

    def mlp(x, prefix):
        a = x @ params[f"{prefix}.W_h"].T + params[f"{prefix}.b_h"]
        pre.append(a)
        return np.maximum(a, 0) @ params[f"{prefix}.W_o"].T + params[f"{prefix}.b_o"]

    phi = mlp(f, "phi")
    cold = params["m"] + mlp(f, "cold")
    v = np.where(np.asarray(gates, bool)[:, None], cold, params["V"][items])
    a_q = np.hstack([v, phi]) @ params["s.W0"].T + params["s.r0"]
    a_h = np.hstack([params["U"][users], np.maximum(a_q, 0)]) @ params["s.W1"].T + params["s.r1"]
    pre += [a_q, a_h]
    return min(float(np.abs(a).min()) for a in pre)


def gradient_instance(rng, gate, margin=1e-3, n=3):
    """A random tiny model and batch whose ReLU inputs all clear ``margin``."""
    while True:
        params, feats = tiny_model(rng)
        users = rng.integers(0, 3, size=n)
        items = rng.integers(0, 3, size=n)
        ys = rng.choice([-1.0, 1.0], size=n)
        gates = np.full(n, bool(gate))
        inputs = feats.rows(items)
        if relu_margin(params, inputs, users, items, gates) > margin:
            return params, inputs, users, items, ys, gates
