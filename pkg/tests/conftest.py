"""Shared test helpers: finite-difference oracles and tiny datasets."""

import numpy as np
import pytest

from xdrec.dataio import DOMAINS, Dataset
from xdrec.tensor import Tensor, backward


def rel_err(approx: np.ndarray, exact: np.ndarray) -> float:
    """Max elementwise relative error with an absolute floor."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.max(np.abs(approx - exact) / (np.abs(exact) + 1e-8)))


def numeric_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued rebuild function.

    `f()` must rebuild the computation from x.data each call; x is
    perturbed in place one element at a time.
    """
    flat = x.data.reshape(-1)
    g = np.zeros(flat.size, dtype=np.float64)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f().item()
        flat[j] = orig - h
        fm = f().item()
        flat[j] = orig
        g[j] = (fp - fm) / (2.0 * h)
    return g.reshape(x.data.shape)


def gradcheck(build, inputs, h: float = 1e-5, tol: float = 1e-5) -> float:
    """Compare reverse-mode gradients of build(*inputs) to central differences.

    `inputs` are float64 leaf tensors with requires_grad=True; `build`
    returns a scalar tensor. Returns the worst relative error seen.
    """
    loss = build()
    grads = backward(loss, inputs)
    worst = 0.0
    for x, g in zip(inputs, grads):
        fd = numeric_grad(lambda: build(), x, h=h)
        worst = max(worst, rel_err(g.data, fd))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst


def make_dataset(pos_s: dict, pos_t: dict, n_items: dict, feature_dim: int = 6,
                 seed: int = 0, ts: dict | None = None) -> Dataset:
    """Dataset straight from positive-index dicts; users indexed 0..max."""
    n_users = 1 + max(max(pos_s, default=0), max(pos_t, default=0))
    role = np.array(
        ["o" if (u in pos_s and u in pos_t) else ("s" if u in pos_s else "t") for u in range(n_users)],
        dtype="<U1",
    )
    rng = np.random.default_rng(seed)
    pos = {
        "S": {u: np.sort(np.asarray(v, dtype=np.int64)) for u, v in pos_s.items()},
        "T": {u: np.sort(np.asarray(v, dtype=np.int64)) for u, v in pos_t.items()},
    }
    tstamps = {"S": {}, "T": {}}
    if ts:
        for d in DOMAINS:
            for u, arr in ts.get(d, {}).items():
                tstamps[d][u] = np.asarray(arr, dtype=np.int64)
    return Dataset(
        user_ids=[f"u{i}" for i in range(n_users)],
        role=role,
        item_ids={d: [f"i{d}{j}" for j in range(n_items[d])] for d in DOMAINS},
        pos=pos,
        ts=tstamps,
        features_users=rng.random((n_users, feature_dim)).astype(np.float32),
        features_items={d: rng.random((n_items[d], feature_dim)).astype(np.float32) for d in DOMAINS},
        min_interactions=1,
    )


def random_bipartite_dataset(rng, n_users: int = 6, n_items_s: int = 5, n_items_t: int = 4) -> Dataset:
    """Random dual-domain positives; every user interacts in some domain."""
    pos_s, pos_t = {}, {}
    for u in range(n_users):
        take_s = rng.random() < 0.8
        take_t = rng.random() < 0.8
        if not (take_s or take_t):
            take_t = True
        if take_s:
            k = int(rng.integers(1, n_items_s + 1))
            pos_s[u] = np.sort(rng.choice(n_items_s, size=k, replace=False))
        if take_t:
            k = int(rng.integers(1, n_items_t + 1))
            pos_t[u] = np.sort(rng.choice(n_items_t, size=k, replace=False))
    if not pos_s:
        pos_s[0] = [0]
    if not pos_t:
        pos_t[0] = [0]
    return make_dataset(pos_s, pos_t, {"S": n_items_s, "T": n_items_t}, seed=int(rng.integers(2**31)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
