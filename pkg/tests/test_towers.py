"""Dual towers: shapes, normalization, prediction range, and the loss."""

import numpy as np
import pytest

from xdrec.tensor import NumericDomainError, ParamSet, Tensor
from xdrec.towers import (
    PRED_EPS,
    TOWER_WIDTH_FACTORS,
    bce_mean,
    init_mlp,
    init_towers,
    l2_normalize_rows,
    mlp_forward,
    predict,
    supervised_loss,
    tower_forward,
    tower_names,
)

D_IN = 3


def _params(rng, dtype=np.float64):
    ps = ParamSet()
    init_towers(ps, D_IN, rng, dtype=dtype)
    return ps


def test_tower_names():
    assert tower_names("S") == ("tower.s_user", "tower.s_item")
    assert tower_names("T") == ("tower.t_user", "tower.t_item")


def test_init_towers_widths_and_counts(rng):
    ps = _params(rng)
    widths = [D_IN * f for f in TOWER_WIDTH_FACTORS]
    assert len(ps) == 4 * 2 * (len(widths) - 1)  # 4 towers, w+b per layer
    for i, (m, n) in enumerate(zip(widths[:-1], widths[1:])):
        assert ps[f"tower.s_user.{i}.w"].shape == (m, n)
        assert ps[f"tower.s_user.{i}.b"].shape == (n,)
        np.testing.assert_array_equal(ps[f"tower.t_item.{i}.b"].data, np.zeros(n))
    assert all(t.requires_grad for t in ps.tensors())


def test_mlp_forward_oracle(rng):
    ps = ParamSet()
    init_mlp(ps, "net", [3, 5, 2], rng, dtype=np.float64)
    x = rng.normal(size=(4, 3))
    got = mlp_forward(ps, "net", Tensor(x)).data
    h = np.maximum(x @ ps["net.0.w"].data + ps["net.0.b"].data, 0.0)
    want = h @ ps["net.1.w"].data + ps["net.1.b"].data  # last layer linear
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_mlp_forward_requires_layers():
    with pytest.raises(NumericDomainError):
        mlp_forward(ParamSet(), "net", Tensor(np.ones((1, 3))))


def test_l2_normalize_rows(rng):
    x = rng.normal(size=(6, 4))
    out = l2_normalize_rows(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.ones(6), rtol=1e-12)
    np.testing.assert_allclose(out, x / np.linalg.norm(x, axis=1, keepdims=True), rtol=1e-12)


def test_l2_normalize_rejects_zero_rows():
    with pytest.raises(NumericDomainError):
        l2_normalize_rows(Tensor(np.zeros((2, 3))))


def test_tower_forward_unit_rows(rng):
    ps = _params(rng)
    z = tower_forward(ps, "tower.s_user", Tensor(rng.normal(size=(5, D_IN))))
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), np.ones(5), atol=1e-6)


def test_predict_range_and_clip(rng):
    ps = _params(rng)
    u = Tensor(rng.normal(size=(8, D_IN)))
    v = Tensor(rng.normal(size=(8, D_IN)))
    yhat = predict(ps, "S", u, v).data
    assert yhat.shape == (8, 1)
    assert np.all(yhat >= PRED_EPS) and np.all(yhat <= 1.0 - PRED_EPS)


def test_predict_identical_towers_give_near_one(rng):
    # copy the user tower onto the item tower; same input gives cos = 1
    ps = ParamSet()
    init_towers(ps, D_IN, rng, dtype=np.float64)
    for name, t in ps.items():
        if name.startswith("tower.s_item."):
            t.data[...] = ps[name.replace("s_item", "s_user")].data
    x = Tensor(np.asarray(np.random.default_rng(0).normal(size=(4, D_IN))))
    yhat = predict(ps, "S", x, x).data
    np.testing.assert_allclose(yhat, 1.0 - PRED_EPS, rtol=1e-12)


def test_predict_domains_use_their_own_towers(rng):
    ps = _params(rng)
    u = Tensor(np.asarray(rng.normal(size=(4, D_IN))))
    v = Tensor(np.asarray(rng.normal(size=(4, D_IN))))
    ys = predict(ps, "S", u, v).data
    yt = predict(ps, "T", u, v).data
    assert not np.allclose(ys, yt)
    # copy S towers onto T towers; domains then agree exactly
    for name, t in ps.items():
        if name.startswith("tower.t_"):
            t.data[...] = ps[name.replace("tower.t_", "tower.s_")].data
    np.testing.assert_array_equal(predict(ps, "T", u, v).data, ys)


def test_bce_mean_values():
    y = Tensor(np.array([[1.0], [0.0]]))
    yhat = Tensor(np.array([[0.5], [0.5]]))
    assert bce_mean(y, yhat).item() == pytest.approx(np.log(2.0), rel=1e-12)
    worst = Tensor(np.array([[PRED_EPS]]))
    got = bce_mean(Tensor(np.array([[1.0]])), worst).item()
    assert got == pytest.approx(-np.log(PRED_EPS), rel=1e-9)


def test_supervised_loss_matches_numpy_oracle():
    rng = np.random.default_rng(2)  # seed picked to avoid all-negative relu rows
    ps = _params(rng)
    u_s = Tensor(rng.normal(size=(6, D_IN)))
    v_s = Tensor(rng.normal(size=(6, D_IN)))
    y_s = Tensor((rng.random((6, 1)) < 0.5).astype(np.float64))
    u_t = Tensor(rng.normal(size=(4, D_IN)))
    v_t = Tensor(rng.normal(size=(4, D_IN)))
    y_t = Tensor((rng.random((4, 1)) < 0.5).astype(np.float64))
    reg_w = 0.01
    got = supervised_loss(
        ps, {"S": (u_s, v_s, y_s), "T": (u_t, v_t, y_t)}, reg_weight=reg_w
    ).item()

    def bce_np(y, yhat):
        return float(-np.mean(y * np.log(yhat) + (1 - y) * np.log(1 - yhat)))

    want = 0.0
    for d, (u, v, y) in {"S": (u_s, v_s, y_s), "T": (u_t, v_t, y_t)}.items():
        want += bce_np(y.data, predict(ps, d, u, v).data)
    ents = np.concatenate([u_s.data, v_s.data, u_t.data, v_t.data])
    want += reg_w * float(np.mean(np.sum(ents * ents, axis=1)))
    assert got == pytest.approx(want, rel=1e-10)


def test_supervised_loss_single_domain_and_zero_reg(rng):
    ps = _params(rng)
    u = Tensor(rng.normal(size=(5, D_IN)))
    v = Tensor(rng.normal(size=(5, D_IN)))
    y = Tensor(np.ones((5, 1)))
    only_s = supervised_loss(ps, {"S": (u, v, y)}, reg_weight=0.0).item()
    want = bce_mean(y, predict(ps, "S", u, v)).item()
    assert only_s == want


def test_supervised_loss_domain_additivity_without_reg(rng):
    ps = _params(rng)
    u_s, v_s = Tensor(rng.normal(size=(3, D_IN))), Tensor(rng.normal(size=(3, D_IN)))
    u_t, v_t = Tensor(rng.normal(size=(3, D_IN))), Tensor(rng.normal(size=(3, D_IN)))
    y = Tensor(np.array([[1.0], [0.0], [1.0]]))
    both = supervised_loss(ps, {"S": (u_s, v_s, y), "T": (u_t, v_t, y)}, 0.0).item()
    s_only = supervised_loss(ps, {"S": (u_s, v_s, y)}, 0.0).item()
    t_only = supervised_loss(ps, {"T": (u_t, v_t, y)}, 0.0).item()
    assert both == s_only + t_only  # exact float add in this direction


def test_supervised_loss_rejects_empty(rng):
    with pytest.raises(NumericDomainError):
        supervised_loss(_params(rng), {}, reg_weight=0.1)
