"""Cross-domain graph convolution.

Two equivalent routes are exposed on purpose: a per-edge message/node
accumulation form (the definition) and a sparse matrix form (the one
training uses). Their agreement on random graphs is a correctness gate.

Layer rule, for edge weight n(u,v) from the normalized adjacency:

    m_{u<-v} = n(u,v) * (e_v W1 + (e_v ⊙ e_u) W_d),  d = edge domain (S->W2, T->W3)
    m_{u<-u} = e_u W1
    e_u'     = LeakyReLU(m_{u<-u} + sum_v m_{u<-v})

which stacks into

    E' = LeakyReLU((L+I) E W1 + ((L_S E) ⊙ E) W2 + ((L_T E) ⊙ E) W3).

`literal_first_term` switches the neighbor term e_v W1 to e_u W1, the
reading printed in the source formula; it copies the receiver into every
message and is kept only for comparison runs.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    ParamSet,
    Tensor,
    add,
    leaky_relu,
    matmul,
    mul,
    spmm,
    tsum,
    concat,
)
from .xgraph import CrossDomainGraph

__all__ = [
    "init_gcn_params",
    "edge_domain",
    "message",
    "propagate_layer",
    "propagate_layer_nodewise",
    "propagate",
]

LEAKY_ALPHA = 0.01


def init_gcn_params(n_layers: int, dim: int, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    """Per-layer W1/W2/W3, Kaiming fan-in normal, constant width."""
    ps = ParamSet()
    std = np.sqrt(2.0 / dim)
    for layer in range(n_layers):
        for w in ("w1", "w2", "w3"):
            ps.add(f"gcn.{layer}.{w}", Tensor(rng.normal(0.0, std, size=(dim, dim)).astype(dtype), requires_grad=True))
    return ps


def edge_domain(g: CrossDomainGraph, a: int, b: int) -> str:
    """Domain of the edge (a, b); raises if the pair is not an edge."""
    item = max(a, b)  # items come after user nodes
    if item < g.item_offset["S"]:
        raise ContractError(f"({a},{b}) joins two user nodes; not an edge")
    d = "S" if item < g.item_offset["T"] else "T"
    mat = g.laplacian[d]._mat
    if mat[min(a, b), item] == 0:
        raise ContractError(f"({a},{b}) is not a recorded {d}-edge")
    return d


def message(g: CrossDomainGraph, u: int, v: int, E: Tensor, w1: Tensor, w2: Tensor, w3: Tensor,
            literal_first_term: bool = False) -> Tensor:
    """Single edge message m_{u<-v}; row vector of the next layer width."""
    d = edge_domain(g, u, v)
    norm = float(g.laplacian[d]._mat[u, v])
    e_u = Tensor(E.data[u : u + 1])
    e_v = Tensor(E.data[v : v + 1])
    src = e_u if literal_first_term else e_v
    wd = w2 if d == "S" else w3
    out = add(matmul(src, w1), matmul(mul(e_v, e_u), wd))
    return mul(out, norm)


def propagate_layer(g: CrossDomainGraph, E: Tensor, w1: Tensor, w2: Tensor, w3: Tensor,
                    no_interaction: bool = False, literal_first_term: bool = False) -> Tensor:
    """Matrix-form layer update over the whole node set."""
    if E.shape[0] != g.n_nodes:
        raise DimensionError(f"propagate_layer: E has {E.shape[0]} rows, graph has {g.n_nodes} nodes")
    if literal_first_term:
        rowsum = Tensor(np.asarray(g.laplacian_all._mat.sum(axis=1), dtype=E.dtype).reshape(-1, 1))
        base = matmul(mul(E, add(rowsum, 1.0)), w1)
    else:
        base = matmul(add(spmm(g.laplacian_all, E), E), w1)
    if no_interaction:
        return leaky_relu(base, LEAKY_ALPHA)
    inter_s = matmul(mul(spmm(g.laplacian["S"], E), E), w2)
    inter_t = matmul(mul(spmm(g.laplacian["T"], E), E), w3)
    return leaky_relu(add(add(base, inter_s), inter_t), LEAKY_ALPHA)


def propagate_layer_nodewise(g: CrossDomainGraph, E: Tensor, w1: Tensor, w2: Tensor, w3: Tensor,
                             literal_first_term: bool = False) -> np.ndarray:
    """Definition-route layer update: explicit message accumulation per node.

    Quadratic in graph size; intended for small graphs and cross-checks.
    """
    lap = g.laplacian_all._mat
    out = np.zeros((g.n_nodes, w1.shape[1]), dtype=np.float64)
    for u in range(g.n_nodes):
        acc = (E.data[u : u + 1].astype(np.float64) @ w1.data.astype(np.float64))[0]
        start, stop = lap.indptr[u], lap.indptr[u + 1]
        for v in lap.indices[start:stop]:
            acc = acc + message(g, u, int(v), E, w1, w2, w3, literal_first_term).numpy()[0]
        out[u] = np.where(acc > 0, acc, LEAKY_ALPHA * acc)
    return out


def propagate(g: CrossDomainGraph, E0: Tensor, params: ParamSet, n_layers: int,
              no_interaction: bool = False, literal_first_term: bool = False) -> Tensor:
    """Run the stack and concatenate every layer's output per node."""
    outs = [E0]
    cur = E0
    for layer in range(n_layers):
        cur = propagate_layer(
            g,
            cur,
            params[f"gcn.{layer}.w1"],
            params[f"gcn.{layer}.w2"],
            params[f"gcn.{layer}.w3"],
            no_interaction=no_interaction,
            literal_first_term=literal_first_term,
        )
        outs.append(cur)
    if len(outs) == 1:
        return E0
    return concat(outs, axis=1)
