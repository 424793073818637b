"""Unified graph construction: node layout, normalization, 2-hop index."""

import numpy as np
import pytest

from conftest import make_dataset
from xdrec.tensor import ContractError, Tensor
from xdrec.xgraph import (
    MAX_TWO_HOP,
    build_graph,
    merge_user_embedding,
    two_hop_neighbors,
)


def _toy_ds():
    # users 0,1 source only; 2,3 overlap; 4,5 target only
    pos_s = {0: [0, 1], 1: [1, 2], 2: [0, 3], 3: [2, 3]}
    pos_t = {2: [0], 3: [0, 1, 2], 4: [1, 3], 5: [2, 3]}
    return make_dataset(pos_s, pos_t, {"S": 4, "T": 4})


def test_merge_user_embedding_modes():
    a = Tensor(np.array([[1.0, 5.0]]))
    b = Tensor(np.array([[2.0, 3.0]]))
    assert merge_user_embedding(a, None) is a
    assert merge_user_embedding(None, b) is b
    np.testing.assert_array_equal(merge_user_embedding(a, b).data, [[2.0, 5.0]])
    with pytest.raises(ContractError):
        merge_user_embedding(None, None)


def test_node_layout_without_duplication():
    ds = _toy_ds()
    g = build_graph(ds)
    np.testing.assert_array_equal(g.user_node[:, 0], np.arange(6))
    np.testing.assert_array_equal(g.user_node[:, 1], np.arange(6))
    assert g.n_user_nodes == 6
    assert g.item_offset == {"S": 6, "T": 10}
    assert g.n_nodes == 14
    np.testing.assert_array_equal(g.overlap_users, [2, 3])
    np.testing.assert_array_equal(g.item_node("T", [0, 3]), [10, 13])


def test_node_layout_with_duplicated_users():
    ds = _toy_ds()
    g = build_graph(ds, duplicate_users=[2], merge_at_eval=True)
    # user 2 takes two consecutive node slots; later users shift by one
    np.testing.assert_array_equal(g.user_node[2], [2, 3])
    np.testing.assert_array_equal(g.user_node[3], [4, 4])
    assert g.n_user_nodes == 7
    np.testing.assert_array_equal(g.overlap_users, [3])  # duplicates leave overlap
    np.testing.assert_array_equal(g.user_side_node("S", [2, 3]), [2, 4])
    np.testing.assert_array_equal(g.user_side_node("T", [2, 3]), [3, 4])
    a, b, merge = g.repr_rows([1, 2, 3])
    np.testing.assert_array_equal(a, [1, 2, 4])
    np.testing.assert_array_equal(b, [1, 3, 4])
    np.testing.assert_array_equal(merge, [False, True, False])


def test_repr_rows_merge_requires_flag():
    ds = _toy_ds()
    g = build_graph(ds, duplicate_users=[2], merge_at_eval=False)
    _, _, merge = g.repr_rows([2])
    assert not merge[0]


def test_duplicate_all_overlap():
    ds = _toy_ds()
    g = build_graph(ds, duplicate_all_overlap=True)
    assert g.duplicated[[2, 3]].all() and not g.duplicated[[0, 1, 4, 5]].any()
    assert len(g.overlap_users) == 0


def test_laplacian_symmetry_and_block_purity():
    ds = _toy_ds()
    g = build_graph(ds, dtype=np.float64)
    for key in ("S", "T"):
        m = g.laplacian[key].toarray()
        np.testing.assert_array_equal(m, m.T)
        users = slice(0, 6)
        assert np.all(m[users, users] == 0.0)  # no user-user entries
        assert np.all(m[6:, 6:] == 0.0)  # no item-item entries
    s = g.laplacian["S"].toarray()
    t = g.laplacian["T"].toarray()
    assert np.all(s[:, 10:] == 0.0) and np.all(s[10:, :] == 0.0)
    assert np.all(t[:, 6:10] == 0.0) and np.all(t[6:10, :] == 0.0)
    np.testing.assert_array_equal(g.laplacian_all.toarray(), s + t)


def test_star_graph_normalization_oracle():
    # one user with k items, each item touched once: weight 1/sqrt(k)
    k = 5
    ds = make_dataset({0: list(range(k))}, {1: [0]}, {"S": k, "T": 1})
    g = build_graph(ds, dtype=np.float64)
    m = g.laplacian["S"].toarray()
    for j in range(k):
        assert m[0, 2 + j] == pytest.approx(1.0 / np.sqrt(k), rel=1e-12)


def test_normalization_uses_total_degree_across_domains():
    # overlap user: 2 edges in S, 3 in T; its degree in BOTH blocks is 5
    ds = make_dataset({0: [0, 1], 1: [0, 1]}, {0: [0, 1, 2], 1: [0, 1, 2]}, {"S": 2, "T": 3})
    g = build_graph(ds, dtype=np.float64)
    s = g.laplacian["S"].toarray()
    t = g.laplacian["T"].toarray()
    # item degrees: every item has 2 edges; user total degree is 5
    assert s[0, g.item_node("S", 0)] == pytest.approx(1.0 / np.sqrt(5 * 2), rel=1e-12)
    assert t[0, g.item_node("T", 2)] == pytest.approx(1.0 / np.sqrt(5 * 2), rel=1e-12)


def test_degree_counts():
    ds = _toy_ds()
    g = build_graph(ds)
    assert g.deg[3] == int(len(ds.pos["S"][3]) + len(ds.pos["T"][3]))
    assert g.deg[g.item_node("S", 1)] == 2  # users 0 and 1
    st = g.stats()
    assert st["edges_S"] == 8 and st["edges_T"] == 8
    assert st["n_overlap_active"] == 2


def test_isolated_nodes_rejected_only_for_full_graph():
    ds = make_dataset({0: [0, 1], 1: [0, 1]}, {0: [0], 1: [0]}, {"S": 3, "T": 1})
    with pytest.raises(ContractError):
        build_graph(ds)  # item S2 never interacts
    pos = {"S": {0: np.array([0]), 1: np.array([1])}, "T": {0: np.array([0]), 1: np.array([0])}}
    g = build_graph(ds, pos=pos)  # training subset may leave held-out items isolated
    assert g.deg[g.item_node("S", 2)] == 0


def test_two_hop_matches_brute_force():
    ds = _toy_ds()
    g = build_graph(ds)
    for d in ("S", "T"):
        for u in g.overlap_users:
            mine = set(ds.pos[d].get(int(u), np.zeros(0, np.int64)).tolist())
            want = sorted(
                v
                for v, items in ds.pos[d].items()
                if v != int(u) and mine & set(items.tolist())
            )
            assert two_hop_neighbors(g, int(u), d) == want


def test_two_hop_rejects_non_overlap_user():
    g = build_graph(_toy_ds())
    with pytest.raises(ContractError):
        two_hop_neighbors(g, 0, "S")


def test_two_hop_excluded_for_duplicated_users():
    ds = _toy_ds()
    g = build_graph(ds, duplicate_users=[2])
    assert 2 not in g.two_hop["S"]
    with pytest.raises(ContractError):
        two_hop_neighbors(g, 2, "S")


def test_two_hop_cap_keeps_highest_counts():
    # user 0 shares item 0 with 70 single-count users; user 71 shares two items
    pos_s = {0: [0, 1]}
    for v in range(1, 71):
        pos_s[v] = [0, 2]
    pos_s[71] = [0, 1, 3]
    pos_t = {0: [0], 71: [0]}
    ds = make_dataset(pos_s, pos_t, {"S": 4, "T": 1})
    g = build_graph(ds)
    nbrs = two_hop_neighbors(g, 0, "S")
    assert len(nbrs) == MAX_TWO_HOP
    assert 71 in nbrs  # co-count 2 beats the crowd
    assert nbrs == sorted(nbrs)
    # ties resolved toward lower user index: kept singles are 1..63
    assert set(nbrs) == {71} | set(range(1, MAX_TWO_HOP))


def test_node_features_repeat_duplicated_rows():
    ds = _toy_ds()
    g = build_graph(ds, duplicate_users=[2])
    f = g.features
    assert set(f) == {"users", "S", "T"}
    assert f["users"].shape == (7, ds.features_users.shape[1])
    np.testing.assert_array_equal(f["users"][2], ds.features_users[2])
    np.testing.assert_array_equal(f["users"][3], ds.features_users[2])
    np.testing.assert_array_equal(f["users"][4], ds.features_users[3])
    np.testing.assert_array_equal(f["S"], ds.features_items["S"])


def test_node_features_absent_when_dataset_has_none():
    ds = _toy_ds()
    ds.features_users = None
    g = build_graph(ds)
    assert g.features is None


def test_graph_dtype_flows_to_laplacian():
    ds = _toy_ds()
    assert build_graph(ds).laplacian_all.dtype == np.float32
    assert build_graph(ds, dtype=np.float64).laplacian["S"].dtype == np.float64
