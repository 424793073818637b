"""Per-domain dual towers, cosine prediction, and the supervised loss.

Each domain has a user tower and an item tower with widths
[D, 2D, 4D, 8D, 4D, 2D, D] over the propagated embedding dim D, ReLU
between layers and none on the last. Outputs are L2-normalized, so the
pair score is a cosine mapped affinely onto (0, 1):

    yhat = clip((cos + 1) / 2, eps, 1 - eps).

The embedding regularizer that the source prints inside the prediction is
applied as a loss-side L2 term instead; adding it to yhat would push
probabilities outside (0, 1) and corrupt the cross-entropy.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    NumericDomainError,
    ParamSet,
    Tensor,
    add,
    broadcast_to,
    clip,
    concat,
    div,
    log,
    matmul,
    mean,
    mul,
    neg,
    relu,
    sqrt,
    sub,
    tsum,
)

__all__ = [
    "TOWER_WIDTH_FACTORS",
    "PRED_EPS",
    "tower_names",
    "init_mlp",
    "init_towers",
    "mlp_forward",
    "l2_normalize_rows",
    "tower_forward",
    "predict",
    "bce_mean",
    "supervised_loss",
]

TOWER_WIDTH_FACTORS = (1, 2, 4, 8, 4, 2, 1)
PRED_EPS = 1e-7


def tower_names(domain: str) -> tuple[str, str]:
    d = domain.lower()
    return f"tower.{d}_user", f"tower.{d}_item"


def init_mlp(params: ParamSet, prefix: str, widths, rng: np.random.Generator, dtype=np.float32):
    """Kaiming fan-in weights, zero biases, one entry pair per layer."""
    for i, (m, n) in enumerate(zip(widths[:-1], widths[1:])):
        std = np.sqrt(2.0 / m)
        params.add(f"{prefix}.{i}.w", Tensor(rng.normal(0.0, std, size=(m, n)).astype(dtype), requires_grad=True))
        params.add(f"{prefix}.{i}.b", Tensor(np.zeros(n, dtype=dtype), requires_grad=True))


def init_towers(params: ParamSet, d_in: int, rng: np.random.Generator, dtype=np.float32):
    widths = [d_in * f for f in TOWER_WIDTH_FACTORS]
    for domain in ("S", "T"):
        for prefix in tower_names(domain):
            init_mlp(params, prefix, widths, rng, dtype)


def mlp_layers(params: ParamSet, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.w" in params:
        n += 1
    return n


def mlp_forward(params: ParamSet, prefix: str, x: Tensor) -> Tensor:
    """ReLU MLP; the final layer is linear."""
    n = mlp_layers(params, prefix)
    if n == 0:
        raise NumericDomainError(f"no layers registered under {prefix!r}")
    h = x
    for i in range(n):
        h = add(matmul(h, params[f"{prefix}.{i}.w"]), params[f"{prefix}.{i}.b"])
        if i < n - 1:
            h = relu(h)
    return h


def l2_normalize_rows(x: Tensor) -> Tensor:
    sq = tsum(mul(x, x), axis=1, keepdims=True)
    if np.any(sq.data < 1e-24):
        raise NumericDomainError("degenerate tower output: zero-norm row cannot be normalized")
    return div(x, broadcast_to(sqrt(sq), x.shape))


def tower_forward(params: ParamSet, prefix: str, x: Tensor) -> Tensor:
    return l2_normalize_rows(mlp_forward(params, prefix, x))


def predict(params: ParamSet, domain: str, u_emb: Tensor, v_emb: Tensor) -> Tensor:
    """Pair scores in (eps, 1-eps) as a column vector."""
    up, vp = tower_names(domain)
    zu = tower_forward(params, up, u_emb)
    zv = tower_forward(params, vp, v_emb)
    cos = tsum(mul(zu, zv), axis=1, keepdims=True)
    return clip(mul(add(cos, 1.0), 0.5), PRED_EPS, 1.0 - PRED_EPS)


def bce_mean(y: Tensor, yhat: Tensor) -> Tensor:
    """Mean binary cross-entropy; the log-likelihood negated."""
    ll = add(mul(y, log(yhat)), mul(sub(1.0, y), log(sub(1.0, yhat))))
    return neg(mean(ll))


def supervised_loss(params: ParamSet, per_domain: dict, reg_weight: float) -> Tensor:
    """Sum of per-domain mean BCE plus the embedding L2 regularizer.

    `per_domain` maps domain -> (u_emb, v_emb, labels column tensor); a
    domain absent from the dict (empty sub-batch) contributes nothing.
    """
    total = None
    ent_rows = []
    for domain in ("S", "T"):
        if domain not in per_domain:
            continue
        u_emb, v_emb, y = per_domain[domain]
        yhat = predict(params, domain, u_emb, v_emb)
        term = bce_mean(y, yhat)
        total = term if total is None else add(total, term)
        ent_rows.extend([u_emb, v_emb])
    if total is None:
        raise NumericDomainError("supervised_loss: both domains empty")
    if reg_weight > 0.0:
        ents = concat(ent_rows, axis=0) if len(ent_rows) > 1 else ent_rows[0]
        reg = mean(tsum(mul(ents, ents), axis=1))
        total = add(total, mul(reg, float(reg_weight)))
    return total
