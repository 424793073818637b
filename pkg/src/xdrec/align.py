"""Interest-alignment losses for overlapping users.

User-user: each overlap user gets one contrastive view per domain by
softmax-attending over the 2-hop neighborhood, the views are projected and
compared to K shared prototypes, and each view must predict the *other*
view's Sinkhorn code (swapped prediction). Codes are constants under
differentiation.

User-item: per-domain gradients of the supervised loss restricted to the
overlap sub-batch, taken w.r.t. the user tower, are pushed toward cosine
agreement. The gradients are built with create_graph, so this loss is
differentiated through a differentiation.
"""

from __future__ import annotations

import numpy as np

from . import towers
from .tensor import (
    DimensionError,
    NumericDomainError,
    ParamSet,
    Tensor,
    add,
    backward,
    div,
    exp,
    log,
    matmul,
    mean,
    mul,
    neg,
    repeat_rows,
    reshape,
    sqrt,
    sub,
    sum_row_blocks,
    take_rows,
    transpose,
    tsum,
)
from .xgraph import CrossDomainGraph

__all__ = [
    "init_align_params",
    "renormalize_prototypes",
    "build_views",
    "sinkhorn_codes",
    "softmax_rows",
    "user_user_loss",
    "grad_vector",
    "user_item_loss",
]

EXTRACTOR_HIDDEN_FACTOR = 2


def init_align_params(params: ParamSet, d_in: int, d_proj: int, n_prototypes: int,
                      rng: np.random.Generator, dtype=np.float32):
    """Two extractor MLPs (shared architecture) plus unit-row prototypes."""
    if n_prototypes < 2:
        raise DimensionError("need at least 2 prototypes")
    widths = [d_in, EXTRACTOR_HIDDEN_FACTOR * d_proj, d_proj]
    towers.init_mlp(params, "align.ext_s", widths, rng, dtype)
    towers.init_mlp(params, "align.ext_t", widths, rng, dtype)
    c = rng.normal(0.0, 1.0, size=(n_prototypes, d_proj))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    params.add("align.prototypes", Tensor(c.astype(dtype), requires_grad=True))


def renormalize_prototypes(params: ParamSet):
    """Scale prototype rows back to unit norm, in place (post-step hook)."""
    c = params["align.prototypes"].data
    c /= np.linalg.norm(c.astype(np.float64), axis=1, keepdims=True).astype(c.dtype)


def build_views(g: CrossDomainGraph, E: Tensor, users: np.ndarray) -> dict:
    """Attention-pooled 2-hop views per domain for the given overlap users.

    Neighbor weights are a softmax over dot products with the user's own
    embedding. Users with no 2-hop neighbors in a domain fall back to
    their own embedding (realized by a self-entry in the padded table).
    Returns {"S": (B, D) tensor, "T": (B, D) tensor}.
    """
    users = np.asarray(users, dtype=np.int64)
    b = len(users)
    if b == 0:
        raise DimensionError("build_views: empty user set")
    views = {}
    for di, d in enumerate(("S", "T")):
        lists = [g.two_hop[d].get(int(u), np.zeros(0, dtype=np.int64)) for u in users]
        width = max(1, max(len(x) for x in lists))
        pad_nodes = np.empty((b, width), dtype=np.int64)
        mask = np.zeros((b, width), dtype=np.float64)
        for r, (u, nbrs) in enumerate(zip(users, lists)):
            self_node = g.user_node[u, di]
            if len(nbrs) == 0:
                pad_nodes[r] = self_node
                mask[r, 0] = 1.0
            else:
                nodes = g.user_node[nbrs, di]
                pad_nodes[r, : len(nodes)] = nodes
                pad_nodes[r, len(nodes) :] = self_node
                mask[r, : len(nodes)] = 1.0
        u_nodes = g.user_node[users, di]

        nbr_emb = take_rows(E, pad_nodes.reshape(-1))  # (B*width, D)
        own = repeat_rows(take_rows(E, u_nodes), width)  # (B*width, D)
        scores = reshape(tsum(mul(nbr_emb, own), axis=1, keepdims=True), (b, width))
        # shift by the max over real entries only; a padded self-entry can
        # dwarf it and underflow every real weight to zero. Zeroing the
        # padded exponents before exp keeps them from overflowing instead.
        mask_t = Tensor(mask.astype(scores.data.dtype))
        valid_max = np.where(mask > 0, scores.data, -np.inf).max(axis=1, keepdims=True)
        shift = Tensor(valid_max.astype(scores.data.dtype))  # constant; softmax-invariant
        weights = mul(exp(mul(sub(scores, shift), mask_t)), mask_t)
        alpha = div(weights, tsum(weights, axis=1, keepdims=True))
        contrib = mul(reshape(alpha, (b * width, 1)), nbr_emb)
        views[d] = sum_row_blocks(contrib, width)
    return views


def sinkhorn_codes(scores, eps: float = 0.05, n_iter: int = 3) -> Tensor:
    """Balanced soft assignments from a (B, K) score matrix; a constant.

    exp(scores/eps) is alternately normalized toward uniform column mass
    1/K and row mass 1/B, then rows are rescaled to sum to one. The global
    max shift before exp changes nothing after normalization.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if not np.isfinite(s).all():
        raise NumericDomainError("sinkhorn_codes: non-finite scores")
    if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 2:
        raise DimensionError(f"sinkhorn_codes: bad score shape {s.shape}")
    b, k = s.shape
    q = np.exp((s.astype(np.float64) - s.max()) / eps)
    q /= q.sum()
    for _ in range(n_iter):
        q /= k * q.sum(axis=0, keepdims=True)
        q /= b * q.sum(axis=1, keepdims=True)
    q *= b
    return Tensor(q.astype(s.dtype))


def softmax_rows(x: Tensor) -> Tensor:
    shift = Tensor(x.data.max(axis=1, keepdims=True))  # constant shift
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=1, keepdims=True))


def user_user_loss(params: ParamSet, view_s: Tensor, view_t: Tensor, temperature: float,
                   sinkhorn_eps: float = 0.05, sinkhorn_iters: int = 3) -> Tensor:
    """Swapped-prediction loss against shared prototypes.

    Both swapped cross-entropy terms are averaged, so a fully uniform
    (p, q) pair sits at ln K. Prototype scores also feed the code
    computation, but codes do not carry gradient.
    """
    if view_s.shape[0] < 2:
        raise DimensionError("user_user_loss: need at least 2 users in the batch")
    c_t = transpose(params["align.prototypes"])
    z = {}
    scores = {}
    for d, view, prefix in (("S", view_s, "align.ext_s"), ("T", view_t, "align.ext_t")):
        z[d] = towers.tower_forward(params, prefix, view)
        scores[d] = matmul(z[d], c_t)
    q_s = sinkhorn_codes(scores["S"], sinkhorn_eps, sinkhorn_iters)
    q_t = sinkhorn_codes(scores["T"], sinkhorn_eps, sinkhorn_iters)
    log_p_t = log(softmax_rows(mul(scores["T"], 1.0 / temperature)))
    log_p_s = log(softmax_rows(mul(scores["S"], 1.0 / temperature)))
    ce_ts = neg(mean(tsum(mul(q_s, log_p_t), axis=1)))
    ce_st = neg(mean(tsum(mul(q_t, log_p_s), axis=1)))
    return mul(add(ce_ts, ce_st), 0.5)


def user_tower_subset(params: ParamSet, domain: str, which: str = "all") -> ParamSet:
    """The user-tower parameters the gradient vectors range over."""
    prefix = towers.tower_names(domain)[0]
    names = [n for n in params.names() if n.startswith(prefix + ".")]
    if which == "last_layer":
        last = max(int(n.split(".")[2]) for n in names)
        names = [n for n in names if n.split(".")[2] == str(last)]
    elif which != "all":
        raise DimensionError(f"unknown gradient subset {which!r}")
    return params.subset(names)


def grad_vector(params: ParamSet, domain: str, u_emb: Tensor, v_emb: Tensor, y: Tensor,
                which: str = "all") -> Tensor:
    """Flattened user-tower gradient of the overlap sub-batch BCE.

    Built with create_graph so downstream losses can differentiate
    through it.
    """
    if u_emb.shape[0] == 0:
        raise DimensionError("grad_vector: empty batch")
    yhat = towers.predict(params, domain, u_emb, v_emb)
    loss = towers.bce_mean(y, yhat)
    grads = backward(loss, user_tower_subset(params, domain, which), create_graph=True)
    return grads.flat_tensor()


def user_item_loss(g_s: Tensor, g_t: Tensor) -> Tensor:
    """One minus the cosine between the two domains' gradient vectors."""
    if g_s.shape != g_t.shape:
        raise DimensionError(f"gradient length mismatch: {g_s.shape} vs {g_t.shape}")
    if not g_s.data.any() and not g_t.data.any():
        return Tensor(np.zeros((), dtype=g_s.dtype))  # both zero: nothing to align
    dot = tsum(mul(g_s, g_t))
    ns = sqrt(tsum(mul(g_s, g_s)))
    nt = sqrt(tsum(mul(g_t, g_t)))
    return sub(1.0, div(dot, mul(ns, nt)))
