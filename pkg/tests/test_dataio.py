"""Parsing, dataset assembly, splits, batch sampling, and the synthetic generator."""

import json

import numpy as np
import pytest

from conftest import make_dataset
from xdrec.dataio import (
    BatchSampler,
    DataFormatError,
    DOMAINS,
    Interaction,
    SynthConfig,
    _normalize_ratings,
    build_dataset,
    featurize,
    filter_min_interactions,
    hashed_bow,
    load_dataset,
    load_feature_table,
    load_interactions,
    prepare_dataset,
    sample_training_batch,
    seed_stream,
    split_from_json,
    split_leave_one_out,
    synth_dataset,
    synth_generate,
    write_dataset,
)
from xdrec.tensor import ContractError

import zlib


# -- parsing ------------------------------------------------------------------


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_interactions_happy_path(tmp_path):
    p = _write(tmp_path, "i.tsv", "u1\ta\tS\t4.5\t100\nu2\tb\tT\t1\n\nu1\tc\tS\t3\t\n")
    rows = load_interactions(p)
    assert rows[0] == Interaction("u1", "a", "S", 4.5, 100)
    assert rows[1].timestamp is None
    assert rows[2].timestamp is None  # trailing empty field means no timestamp
    assert len(rows) == 3


@pytest.mark.parametrize(
    "line,fragment",
    [
        ("u1\ta\tS", ":1:"),
        ("u1\ta\tX\t1.0", "domain"),
        ("u1\ta\tS\tabc", "rating"),
        ("u1\ta\tS\t1.0\txyz", "timestamp"),
        ("\ta\tS\t1.0", "empty"),
    ],
)
def test_load_interactions_errors_carry_line_numbers(tmp_path, line, fragment):
    p = _write(tmp_path, "bad.tsv", line + "\n")
    with pytest.raises(DataFormatError) as exc:
        load_interactions(p)
    assert ":1:" in str(exc.value) and fragment in str(exc.value)


def test_load_feature_table(tmp_path):
    p = _write(tmp_path, "f.tsv", "a\t1.0,2.0\nb\t0.5,0.25\n")
    t = load_feature_table(p)
    np.testing.assert_array_equal(t["a"], np.array([1.0, 2.0], dtype=np.float32))
    assert t["b"].dtype == np.float32


def test_load_feature_table_dim_mismatch(tmp_path):
    p = _write(tmp_path, "f.tsv", "a\t1.0,2.0\nb\t0.5\n")
    with pytest.raises(DataFormatError) as exc:
        load_feature_table(p)
    assert ":2:" in str(exc.value)


def test_load_feature_table_bad_value(tmp_path):
    p = _write(tmp_path, "f.tsv", "a\t1.0,zz\n")
    with pytest.raises(DataFormatError):
        load_feature_table(p)


def test_rating_normalization_to_unit_interval():
    rows = [Interaction("u", "a", "S", r) for r in (1.0, 3.0, 5.0)]
    out = _normalize_ratings(rows)
    assert [i.rating for i in out] == [0.0, 0.5, 1.0]
    already = [Interaction("u", "a", "S", 0.3)]
    assert _normalize_ratings(already)[0].rating == 0.3
    flat = _normalize_ratings([Interaction("u", "a", "S", 7.0)] * 2)
    assert all(i.rating == 1.0 for i in flat)


def test_filter_cascades_to_fixpoint():
    # dropping item "y" (1 use) pushes u3 below 2 interactions, which then
    # pushes item "x" below 2 uses, emptying everything
    rows = [
        Interaction("u1", "x", "S", 1.0),
        Interaction("u3", "x", "S", 1.0),
        Interaction("u3", "y", "S", 1.0),
    ]
    assert filter_min_interactions(rows, 2) == []
    kept = filter_min_interactions(rows, 1)
    assert len(kept) == 3


# -- dataset assembly ------------------------------------------------------------


def _toy_rows():
    return [
        Interaction("a", "i1", "S", 5.0, 3),
        Interaction("a", "i2", "S", 1.0, 1),
        Interaction("b", "i1", "S", 2.0, 9),
        Interaction("b", "j1", "T", 4.0, 2),
        Interaction("c", "j1", "T", 3.0, 7),
        Interaction("c", "j2", "T", 3.0, 8),
    ]


def test_build_dataset_roles_and_indexing():
    ds = build_dataset(_toy_rows(), min_interactions=1)
    assert ds.user_ids == ["a", "b", "c"]
    assert list(ds.role) == ["s", "o", "t"]
    np.testing.assert_array_equal(ds.overlap_users, [1])
    np.testing.assert_array_equal(ds.users_of("S"), [0, 1])
    np.testing.assert_array_equal(ds.users_of("T"), [1, 2])
    assert ds.item_ids["S"] == ["i1", "i2"]
    np.testing.assert_array_equal(ds.pos["S"][0], [0, 1])
    st = ds.stats()
    assert st["n_users"] == 3 and st["interactions_S"] == 3 and st["n_overlap"] == 1


def test_build_dataset_dedupes_keeping_last_timestamp():
    rows = [
        Interaction("a", "i1", "S", 1.0, 3),
        Interaction("a", "i1", "S", 1.0, 8),
        Interaction("a", "i2", "S", 1.0, 1),
        Interaction("b", "j1", "T", 1.0, 2),
    ]
    ds = build_dataset(rows, min_interactions=1)
    np.testing.assert_array_equal(ds.pos["S"][0], [0, 1])
    np.testing.assert_array_equal(ds.ts["S"][0], [8, 1])


def test_build_dataset_mixed_missing_timestamps_drop_ordering():
    rows = [
        Interaction("a", "i1", "S", 1.0, 3),
        Interaction("a", "i2", "S", 1.0, None),
        Interaction("b", "j1", "T", 1.0, 2),
    ]
    ds = build_dataset(rows, min_interactions=1)
    assert ds.ts["S"][0] is None


def test_build_dataset_rejects_empty_domain():
    rows = [Interaction("a", "i1", "S", 1.0), Interaction("a", "i2", "S", 1.0)]
    with pytest.raises(ContractError) as exc:
        build_dataset(rows, min_interactions=1)
    assert "domain T" in str(exc.value)


def test_build_dataset_empty_after_filter_raises():
    with pytest.raises(ContractError):
        build_dataset(_toy_rows(), min_interactions=10)


def test_build_dataset_missing_feature_id_raises():
    with pytest.raises(ContractError) as exc:
        build_dataset(_toy_rows(), features_users={"a": np.ones(3, np.float32)}, min_interactions=1)
    assert "user" in str(exc.value)


def test_build_dataset_fallback_features_deterministic():
    d1 = build_dataset(_toy_rows(), min_interactions=1, fallback_dim=8)
    d2 = build_dataset(_toy_rows(), min_interactions=1, fallback_dim=8)
    np.testing.assert_array_equal(d1.features_users, d2.features_users)
    assert d1.features_users.shape == (3, 8)
    assert d1.features_items["T"].shape == (2, 8)


def test_build_dataset_interest_labels():
    labels = {u: np.full(4, 0.25, np.float32) for u in "abc"}
    ds = build_dataset(_toy_rows(), min_interactions=1, interest_labels=labels)
    assert ds.interest_labels.shape == (3, 4)
    with pytest.raises(ContractError):
        build_dataset(_toy_rows(), min_interactions=1, interest_labels={"a": np.ones(4)})


def test_content_hash_tracks_features():
    d1 = build_dataset(_toy_rows(), min_interactions=1)
    d2 = build_dataset(_toy_rows(), min_interactions=1)
    assert d1.content_hash() == d2.content_hash()
    d2.features_users = d1.features_users.copy()
    d2.features_users[0, 0] += 1.0
    assert d1.content_hash() != d2.content_hash()


# -- featurization ------------------------------------------------------------------


def test_hashed_bow_bucket_and_norm():
    v = hashed_bow(["alpha", "beta", "alpha"], 16)
    assert v.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(v), 1.0, rtol=1e-6)
    want = np.zeros(16)
    want[zlib.crc32(b"alpha") % 16] += 2.0
    want[zlib.crc32(b"beta") % 16] += 1.0
    want /= np.linalg.norm(want)
    np.testing.assert_allclose(v, want, atol=1e-7)
    np.testing.assert_array_equal(hashed_bow([], 4), np.zeros(4, np.float32))


def test_featurize_numeric_categorical_text():
    rows = [
        {"age": 10, "color": "red", "bio": "likes cats"},
        {"age": 30, "color": "blue", "bio": "likes dogs"},
    ]
    schema = {"age": "numeric", "color": "categorical", "bio": "text"}
    out = featurize(rows, schema, d_feat=8, n_text_buckets=4)
    assert out.shape == (2, 8) and out.dtype == np.float32
    np.testing.assert_allclose(out[:, 0], [0.0, 1.0])
    np.testing.assert_allclose(out[:, 1:3], [[0.0, 1.0], [1.0, 0.0]])  # levels sorted: blue, red
    assert np.linalg.norm(out[0, 3:7]) == pytest.approx(1.0, rel=1e-6)
    assert np.all(out[:, 7] == 0.0)  # zero padding


def test_featurize_truncates_to_width():
    rows = [{"c": str(i)} for i in range(5)]
    out = featurize(rows, {"c": "categorical"}, d_feat=3)
    assert out.shape == (5, 3)


def test_featurize_unknown_kind():
    with pytest.raises(ContractError):
        featurize([{"a": 1}], {"a": "fancy"}, d_feat=4)


def test_featurize_empty_rows():
    assert featurize([], {"a": "numeric"}, d_feat=4).shape == (0, 4)


# -- splits ---------------------------------------------------------------------------


def _split_ds(with_ts: bool = False):
    pos_s = {u: list(range(u, u + 6)) for u in range(8)}
    pos_t = {u: list(range(2 * (u - 4), 2 * (u - 4) + 4)) for u in range(4, 12)}
    pos_t[12] = [7]  # single positive, must be skipped but kept for training
    ts = None
    if with_ts:
        ts = {"S": {0: [9, 9, 3, 1, 2, 0]}, "T": {}}
    return make_dataset(pos_s, pos_t, {"S": 120, "T": 110}, ts=ts)


def test_split_holdout_invariants():
    ds = _split_ds()
    plan = split_leave_one_out(ds, seed=5)
    for d in DOMAINS:
        for u, p, negs in zip(plan.test_users[d], plan.test_pos[d], plan.test_negs[d]):
            full = set(ds.pos[d][int(u)].tolist())
            assert int(p) in full
            assert int(p) not in plan.train_pos[d][int(u)]
            assert len(plan.train_pos[d][int(u)]) == len(full) - 1
            assert negs.shape == (99,)
            assert len(set(negs.tolist())) == 99
            assert not (set(negs.tolist()) & full)


def test_split_skips_single_positive_users():
    ds = _split_ds()
    plan = split_leave_one_out(ds, seed=5)
    assert 12 not in plan.test_users["T"]
    np.testing.assert_array_equal(plan.train_pos["T"][12], [7])
    assert plan.skipped["T"] == 1


def test_split_latest_timestamp_tie_breaks_to_higher_item():
    ds = _split_ds(with_ts=True)
    plan = split_leave_one_out(ds, seed=0)
    idx = list(plan.test_users["S"]).index(0)
    assert int(plan.test_pos["S"][idx]) == 1  # ts 9 tie between items 0 and 1


def test_split_requires_enough_items():
    ds = make_dataset({0: [0, 1], 1: [1, 2]}, {0: [0, 1], 1: [1, 2]}, {"S": 120, "T": 50})
    with pytest.raises(ContractError):
        split_leave_one_out(ds, seed=0)


def test_split_deterministic_in_seed():
    ds = _split_ds()
    assert split_leave_one_out(ds, 3).content_hash() == split_leave_one_out(ds, 3).content_hash()
    assert split_leave_one_out(ds, 3).content_hash() != split_leave_one_out(ds, 4).content_hash()


def test_split_json_round_trip():
    ds = _split_ds()
    plan = split_leave_one_out(ds, seed=7)
    obj = json.loads(json.dumps(plan.to_json_obj(ds)))
    back = split_from_json(ds, obj)
    assert back.content_hash() == plan.content_hash()
    for d in DOMAINS:
        np.testing.assert_array_equal(back.test_users[d], plan.test_users[d])
        np.testing.assert_array_equal(back.test_negs[d], plan.test_negs[d])
        for u in plan.train_pos[d]:
            np.testing.assert_array_equal(back.train_pos[d][u], plan.train_pos[d][u])


def test_split_json_detects_tampering():
    ds = _split_ds()
    obj = split_leave_one_out(ds, seed=7).to_json_obj(ds)
    obj["hash"] = "0" * 32
    with pytest.raises(DataFormatError):
        split_from_json(ds, obj)


def test_split_json_unknown_id():
    ds = _split_ds()
    obj = split_leave_one_out(ds, seed=7).to_json_obj(ds)
    obj["cases"]["S"][0]["user"] = "nobody"
    with pytest.raises(DataFormatError) as exc:
        split_from_json(ds, obj)
    assert "nobody" in str(exc.value)


# -- determinism helpers ----------------------------------------------------------------


def test_seed_stream_independent_tags():
    a = seed_stream(1, "x").random(4)
    b = seed_stream(1, "x").random(4)
    c = seed_stream(1, "y").random(4)
    d = seed_stream(2, "x").random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


# -- batches ------------------------------------------------------------------------------


def test_batch_sampler_shape_and_purity():
    ds = _split_ds()
    plan = split_leave_one_out(ds, seed=1)
    batch = sample_training_batch(ds, plan, batch_size=16, neg_ratio=3, seed=0)
    assert len(batch) == 16 * 4
    labels = batch.labels.reshape(16, 4)
    np.testing.assert_array_equal(labels[:, 0], np.ones(16, np.float32))
    np.testing.assert_array_equal(labels[:, 1:], np.zeros((16, 3), np.float32))
    for u, v, y, d in zip(batch.users, batch.items, batch.labels, batch.domains):
        observed = set(ds.pos[d][int(u)].tolist())
        if y == 1.0:
            assert int(v) in plan.train_pos[d][int(u)]
        else:
            assert int(v) not in observed  # held-out item is excluded too
    side = batch.side("S")
    assert np.all(batch.domains[side] == "S")


def test_batch_sampler_deterministic():
    ds = _split_ds()
    plan = split_leave_one_out(ds, seed=1)
    b1 = sample_training_batch(ds, plan, 8, 2, seed=42)
    b2 = sample_training_batch(ds, plan, 8, 2, seed=42)
    np.testing.assert_array_equal(b1.users, b2.users)
    np.testing.assert_array_equal(b1.items, b2.items)
    np.testing.assert_array_equal(b1.domains, b2.domains)
    b3 = sample_training_batch(ds, plan, 8, 2, seed=43)
    assert not (np.array_equal(b1.users, b3.users) and np.array_equal(b1.items, b3.items))


def test_batch_sampler_rejects_bad_ratio():
    ds = _split_ds()
    plan = split_leave_one_out(ds, seed=1)
    with pytest.raises(ContractError):
        BatchSampler(ds, plan, 0, seed_stream(0, "batch"))


# -- synthetic data -------------------------------------------------------------------------


def _small_cfg(**kw):
    base = dict(
        n_users_s=80,
        n_users_t=80,
        n_overlap=40,
        n_items={"S": 150, "T": 150},
        n_interests=4,
        mean_interactions={"S": 20.0, "T": 8.0},
        feature_dim=8,
        seed=3,
    )
    base.update(kw)
    return SynthConfig(**base)


def test_synth_counts_and_ids():
    cfg = _small_cfg()
    inters, feats, labels = synth_generate(cfg)
    assert len(feats["users"]) == 200
    assert sum(1 for u in feats["users"] if u.startswith("uo")) == 40
    assert len(feats["items"]["S"]) == 150
    assert all(i.rating in (1.0, 5.0) for i in inters)
    assert all(i.timestamp is not None for i in inters)
    assert set(labels) == set(feats["users"])
    assert all(v.shape == (4,) for v in labels.values())


def test_synth_interaction_rates_track_config():
    cfg = _small_cfg()
    inters, _, _ = synth_generate(cfg)
    per_user = {"S": {}, "T": {}}
    for it in inters:
        per_user[it.domain][it.user] = per_user[it.domain].get(it.user, 0) + 1
    mean_s = np.mean(list(per_user["S"].values()))
    mean_t = np.mean(list(per_user["T"].values()))
    assert abs(mean_s / 20.0 - 1.0) < 0.2
    assert abs(mean_t / 8.0 - 1.0) < 0.2
    assert mean_t < mean_s  # second domain is the sparse one


def test_synth_dataset_roles():
    ds = synth_dataset(_small_cfg(), min_interactions=1)
    assert ds.n_users == 200
    assert len(ds.overlap_users) == 40
    assert ds.interest_labels.shape == (200, 4)
    assert ds.features_users.shape == (200, 8)


def test_synth_config_validation():
    with pytest.raises(ContractError):
        _small_cfg(n_overlap=0).validate()
    with pytest.raises(ContractError):
        _small_cfg(feature_dim=2).validate()
    with pytest.raises(ContractError):
        _small_cfg(mean_interactions={"S": 0.0, "T": 5.0}).validate()
    with pytest.raises(ContractError):
        _small_cfg(user_feature_signal=-0.1).validate()


def test_user_feature_signal_scales_interest_part():
    # with the noise term silenced, signal 0 zeroes user features entirely
    # while item features keep their cluster indicator
    _, feats, _ = synth_generate(_small_cfg(feature_noise=0.0, user_feature_signal=0.0))
    assert all(not v.any() for v in feats["users"].values())
    assert all(v.sum() == 1.0 for v in feats["items"]["S"].values())
    _, feats, _ = synth_generate(_small_cfg(feature_noise=0.0))
    assert all(v.any() for v in feats["users"].values())


def test_synth_deterministic_per_seed():
    a = synth_dataset(_small_cfg(), min_interactions=1).content_hash()
    b = synth_dataset(_small_cfg(), min_interactions=1).content_hash()
    c = synth_dataset(_small_cfg(seed=4), min_interactions=1).content_hash()
    assert a == b
    assert a != c


# -- writers ------------------------------------------------------------------------------


def test_write_then_load_preserves_content_hash(tmp_path):
    cfg = _small_cfg()
    inters, feats, labels = synth_generate(cfg)
    write_dataset(tmp_path / "raw", inters, feats, labels)
    direct = build_dataset(
        inters,
        features_users=feats["users"],
        features_items=feats["items"],
        min_interactions=2,
        interest_labels=labels,
    )
    loaded = load_dataset(tmp_path / "raw", min_interactions=2)
    assert loaded.content_hash() == direct.content_hash()
    np.testing.assert_array_equal(loaded.interest_labels, direct.interest_labels)


def test_load_dataset_requires_interactions(tmp_path):
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path)


def test_prepare_dataset_idempotent_hash(tmp_path):
    cfg = _small_cfg()
    inters, feats, _ = synth_generate(cfg)
    write_dataset(tmp_path / "raw", inters, feats)
    stats = prepare_dataset(
        tmp_path / "raw" / "interactions.tsv",
        tmp_path / "prepared",
        user_features_path=tmp_path / "raw" / "features_users.tsv",
        item_features_paths={d: tmp_path / "raw" / f"features_items_{d}.tsv" for d in DOMAINS},
        min_interactions=2,
    )
    assert (tmp_path / "prepared" / "stats.json").exists()
    reloaded = load_dataset(tmp_path / "prepared", min_interactions=2)
    assert reloaded.content_hash() == stats["dataset_hash"]
    assert reloaded.stats()["n_users"] == stats["n_users"]
