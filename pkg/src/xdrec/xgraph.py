"""Unified cross-domain graph: node space, normalized adjacency, 2-hop index.

Node layout: user nodes first, then domain-S items, then domain-T items.
A user may be *duplicated* into per-domain copies, which realizes both the
separate-graph ablation (copies merged again when scoring) and overlap
severing (copies stay independent identities). Duplicated users leave the
overlap set, so alignment losses never see them.

Edge (a, b) of domain d gets weight 1/sqrt(deg(a) * deg(b)) in L_d, where
deg is the node's total degree in the unified graph (zero treated as one).
L = L_S + L_T is symmetric; the two blocks have disjoint support because
every item belongs to exactly one domain.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .dataio import DOMAINS, Dataset
from .tensor import ContractError, CsrMatrix, Tensor, maximum

__all__ = ["CrossDomainGraph", "build_graph", "merge_user_embedding", "two_hop_neighbors"]

MAX_TWO_HOP = 64


def merge_user_embedding(e_s: Tensor | None, e_t: Tensor | None) -> Tensor:
    """Combine a user's per-domain embeddings: passthrough or elementwise max."""
    if e_s is None and e_t is None:
        raise ContractError("merge_user_embedding: both inputs absent")
    if e_t is None:
        return e_s
    if e_s is None:
        return e_t
    return maximum(e_s, e_t)


class CrossDomainGraph:
    """Immutable structure shared by training and (read-only) evaluation."""

    def __init__(self, ds: Dataset, pos: dict, duplicated: np.ndarray, merge_at_eval: bool, dtype):
        self.ds = ds
        self.pos = pos
        self.merge_at_eval = bool(merge_at_eval)
        self.dtype = np.dtype(dtype)

        n_users = ds.n_users
        dup = np.zeros(n_users, dtype=bool)
        dup[duplicated] = True
        self.duplicated = dup

        # user -> (node for S-side edges, node for T-side edges)
        self.user_node = np.zeros((n_users, 2), dtype=np.int64)
        nid = 0
        for u in range(n_users):
            if dup[u]:
                self.user_node[u] = (nid, nid + 1)
                nid += 2
            else:
                self.user_node[u] = (nid, nid)
                nid += 1
        self.n_user_nodes = nid
        self.item_offset = {"S": nid, "T": nid + ds.n_items("S")}
        self.n_nodes = nid + ds.n_items("S") + ds.n_items("T")

        overlap = [int(u) for u in ds.overlap_users if not dup[u]]
        self.overlap_users = np.array(overlap, dtype=np.int64)

        self.edges = {}
        for di, d in enumerate(DOMAINS):
            us, vs = [], []
            for u in sorted(pos[d]):
                items = pos[d][u]
                us.append(np.full(len(items), self.user_node[u, di], dtype=np.int64))
                vs.append(items + self.item_offset[d])
            if us:
                self.edges[d] = (np.concatenate(us), np.concatenate(vs))
            else:
                self.edges[d] = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

        self.deg_type = {}
        for d in DOMAINS:
            deg = np.zeros(self.n_nodes, dtype=np.int64)
            eu, ev = self.edges[d]
            np.add.at(deg, eu, 1)
            np.add.at(deg, ev, 1)
            self.deg_type[d] = deg
        self.deg = self.deg_type["S"] + self.deg_type["T"]

        norm_deg = np.maximum(self.deg, 1).astype(np.float64)
        self.laplacian = {}
        for d in DOMAINS:
            eu, ev = self.edges[d]
            w = 1.0 / np.sqrt(norm_deg[eu] * norm_deg[ev])
            rows = np.concatenate([eu, ev])
            cols = np.concatenate([ev, eu])
            vals = np.concatenate([w, w]).astype(self.dtype)
            self.laplacian[d] = CsrMatrix.from_coo(rows, cols, vals, (self.n_nodes, self.n_nodes), dtype=self.dtype)
        m = self.laplacian["S"]._mat + self.laplacian["T"]._mat
        m.sort_indices()
        self.laplacian_all = CsrMatrix(m.shape, m.indptr, m.indices, m.data)

        self.features = self._node_features()
        self.two_hop = {d: self._two_hop_index(d) for d in DOMAINS}

    # -- construction helpers ----------------------------------------------

    def _node_features(self) -> dict | None:
        """Feature blocks in node order: duplicated users repeat their row."""
        ds = self.ds
        if ds.features_users is None:
            return None
        rows = np.zeros(self.n_user_nodes, dtype=np.int64)
        for u in range(ds.n_users):
            rows[self.user_node[u, 0]] = u
            rows[self.user_node[u, 1]] = u
        out = {"users": ds.features_users[rows].astype(np.float32)}
        for d in DOMAINS:
            out[d] = ds.features_items[d].astype(np.float32)
        return out

    def _two_hop_index(self, d: str) -> dict:
        """Capped co-interaction neighbor lists for current overlap users.

        Values are user indices sorted ascending; selection keeps the
        MAX_TWO_HOP highest co-interaction counts, ties toward lower index.
        """
        n_items = self.ds.n_items(d)
        rows, cols = [], []
        for u in sorted(self.pos[d]):
            items = self.pos[d][u]
            rows.extend([u] * len(items))
            cols.extend(items.tolist())
        a = sp.csr_matrix(
            (np.ones(len(rows), dtype=np.float64), (rows, cols)), shape=(self.ds.n_users, n_items)
        )
        index = {}
        if not len(self.overlap_users):
            return index
        co = (a[self.overlap_users] @ a.T).tocsr()  # (n_overlap, n_users) co-counts
        for r, u in enumerate(self.overlap_users):
            start, stop = co.indptr[r], co.indptr[r + 1]
            nbrs = co.indices[start:stop]
            counts = co.data[start:stop]
            keep = nbrs != u
            nbrs, counts = nbrs[keep], counts[keep]
            if len(nbrs) > MAX_TWO_HOP:
                order = np.lexsort((nbrs, -counts))[:MAX_TWO_HOP]
                nbrs = nbrs[order]
            index[int(u)] = np.sort(nbrs).astype(np.int64)
        return index

    # -- read API -------------------------------------------------------------

    def item_node(self, domain: str, item_idx) -> np.ndarray:
        return np.asarray(item_idx, dtype=np.int64) + self.item_offset[domain]

    def user_side_node(self, domain: str, user_idx) -> np.ndarray:
        """Node carrying this user's edges in `domain` (the copy if duplicated)."""
        return self.user_node[np.asarray(user_idx, dtype=np.int64), DOMAINS.index(domain)]

    def repr_rows(self, user_idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Scoring representation per user: (rows_a, rows_b, merge mask).

        Non-duplicated users give the same row twice with merge False.
        Duplicated users under merge_at_eval give both copies with merge
        True; severed duplicates are scored per domain by the caller via
        user_side_node instead.
        """
        user_idx = np.asarray(user_idx, dtype=np.int64)
        a = self.user_node[user_idx, 0]
        b = self.user_node[user_idx, 1]
        merge = self.duplicated[user_idx] & self.merge_at_eval
        return a, b, merge

    def stats(self) -> dict:
        return {
            "n_nodes": int(self.n_nodes),
            "n_user_nodes": int(self.n_user_nodes),
            "n_duplicated_users": int(self.duplicated.sum()),
            "n_overlap_active": int(len(self.overlap_users)),
            "edges_S": int(len(self.edges["S"][0])),
            "edges_T": int(len(self.edges["T"][0])),
        }


def build_graph(
    ds: Dataset,
    pos: dict | None = None,
    duplicate_users=None,
    duplicate_all_overlap: bool = False,
    merge_at_eval: bool = False,
    dtype=np.float32,
) -> CrossDomainGraph:
    """Assemble the graph from interaction lists (training subset by default).

    With pos=None the full interaction set is used and isolated entities are
    a contract violation; training passes the split's train positives, where
    a fully held-out item may legitimately end up isolated.
    """
    check_isolated = pos is None
    if pos is None:
        pos = ds.pos
    if duplicate_all_overlap:
        duplicated = ds.overlap_users
    elif duplicate_users is not None:
        duplicated = np.asarray(duplicate_users, dtype=np.int64)
    else:
        duplicated = np.zeros(0, dtype=np.int64)
    g = CrossDomainGraph(ds, pos, duplicated, merge_at_eval, dtype)
    if check_isolated and int((g.deg == 0).sum()):
        raise ContractError(f"graph has {(g.deg == 0).sum()} isolated nodes")
    return g


def two_hop_neighbors(g: CrossDomainGraph, u: int, domain: str) -> list:
    """User indices sharing an item with overlap user `u` in `domain`."""
    if u not in set(g.overlap_users.tolist()):
        raise ContractError(f"user {u} is not an active overlap user")
    return g.two_hop[domain].get(int(u), np.zeros(0, dtype=np.int64)).tolist()
