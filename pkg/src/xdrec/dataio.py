"""Dual-domain interaction ingestion, splits, sampling, and synthesis.

File formats (UTF-8 TSV):

* interactions: ``user_id<TAB>item_id<TAB>domain<TAB>rating[<TAB>timestamp]``
  with domain in {S, T}; ratings outside [0, 1] are min-max normalized.
* features: ``entity_id<TAB>f1,f2,...`` (comma-separated floats).
* synthetic interest labels: ``user_id<TAB>k1,...,kK*`` (mixture weights).

Item ids are namespaced per domain internally, so the same external item
id appearing under S and T denotes two different items.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError, DimensionError

__all__ = [
    "Interaction",
    "Dataset",
    "SplitPlan",
    "SynthConfig",
    "DataFormatError",
    "seed_stream",
    "canonical_json",
    "md5_hex",
    "load_interactions",
    "load_feature_table",
    "load_dataset",
    "build_dataset",
    "filter_min_interactions",
    "featurize",
    "hashed_bow",
    "split_leave_one_out",
    "split_from_json",
    "sample_training_batch",
    "synth_generate",
    "write_dataset",
    "prepare_dataset",
]

DOMAINS = ("S", "T")


class DataFormatError(ValueError):
    """A data file failed to parse; message carries the line number."""


# -- determinism helpers -------------------------------------------------------


def seed_stream(seed: int, tag: str) -> np.random.Generator:
    """Independent, reproducible RNG stream for a (seed, purpose) pair."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())])))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def md5_hex(text: str) -> str:
    return hashlib.md5(text.encode("utf-8")).hexdigest()


# -- core records ----------------------------------------------------------------


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    domain: str
    rating: float
    timestamp: int | None = None


@dataclass
class Dataset:
    """ID-mapped dual-domain dataset with binarized interactions.

    Users are indexed over the union of both domains' users; items are
    indexed per domain. `role[u]` is "s" (source only), "t" (target only)
    or "o" (overlapping).
    """

    user_ids: list
    role: np.ndarray  # array of 's'|'o'|'t' per user index
    item_ids: dict  # domain -> list of external ids
    pos: dict  # domain -> dict(user index -> np.ndarray of item indices, sorted)
    ts: dict  # domain -> dict(user index -> np.ndarray of timestamps or None)
    features_users: np.ndarray | None = None
    features_items: dict = field(default_factory=dict)  # domain -> array or None
    interest_labels: np.ndarray | None = None  # synth ground truth (n_users, K*)
    min_interactions: int = 5

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def n_items(self, domain: str) -> int:
        return len(self.item_ids[domain])

    def n_interactions(self, domain: str) -> int:
        return sum(len(v) for v in self.pos[domain].values())

    @property
    def overlap_users(self) -> np.ndarray:
        return np.flatnonzero(self.role == "o")

    def users_of(self, domain: str) -> np.ndarray:
        key = "s" if domain == "S" else "t"
        return np.flatnonzero((self.role == key) | (self.role == "o"))

    def stats(self) -> dict:
        out = {"n_users": self.n_users, "n_overlap": int(len(self.overlap_users))}
        for d in DOMAINS:
            out[f"users_{d}"] = int(len(self.users_of(d)))
            out[f"items_{d}"] = self.n_items(d)
            out[f"interactions_{d}"] = self.n_interactions(d)
        return out

    def content_hash(self) -> str:
        h = hashlib.md5()
        h.update(canonical_json(self.stats()).encode())
        for d in DOMAINS:
            for u in sorted(self.pos[d]):
                h.update(f"{d}|{self.user_ids[u]}|".encode())
                h.update(",".join(self.item_ids[d][i] for i in self.pos[d][u]).encode())
                t = self.ts[d].get(u) if self.ts[d] else None
                if t is not None:
                    h.update(("|" + ",".join(str(int(x)) for x in t)).encode())
        if self.features_users is not None:
            h.update(np.ascontiguousarray(self.features_users, dtype="<f4").tobytes())
        for d in DOMAINS:
            f = self.features_items.get(d)
            if f is not None:
                h.update(np.ascontiguousarray(f, dtype="<f4").tobytes())
        return h.hexdigest()


# -- parsing ------------------------------------------------------------------------


def load_interactions(path) -> list[Interaction]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (4, 5):
                raise DataFormatError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields, got {len(parts)}")
            user, item, domain, rating = parts[0], parts[1], parts[2], parts[3]
            if domain not in DOMAINS:
                raise DataFormatError(f"{path}:{lineno}: domain must be S or T, got {domain!r}")
            try:
                r = float(rating)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad rating {rating!r}") from None
            ts = None
            if len(parts) == 5 and parts[4] != "":
                try:
                    ts = int(parts[4])
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: bad timestamp {parts[4]!r}") from None
            if not user or not item:
                raise DataFormatError(f"{path}:{lineno}: empty user or item id")
            out.append(Interaction(user, item, domain, r, ts))
    return out


def load_feature_table(path) -> dict:
    """entity_id -> float vector; all rows must share one dimension."""
    table = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 2 tab-separated fields")
            try:
                vec = np.array([float(x) for x in parts[1].split(",")], dtype=np.float32)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad feature value") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DataFormatError(f"{path}:{lineno}: feature dim {vec.size} != {dim}")
            table[parts[0]] = vec
    return table


def _normalize_ratings(inters: list[Interaction]) -> list[Interaction]:
    if not inters:
        return inters
    ratings = np.array([i.rating for i in inters])
    lo, hi = float(ratings.min()), float(ratings.max())
    if lo >= 0.0 and hi <= 1.0:
        return inters
    span = hi - lo
    if span == 0.0:
        return [Interaction(i.user, i.item, i.domain, 1.0, i.timestamp) for i in inters]
    return [Interaction(i.user, i.item, i.domain, (i.rating - lo) / span, i.timestamp) for i in inters]


def filter_min_interactions(inters: list[Interaction], min_interactions: int) -> list[Interaction]:
    """Drop users/items below the threshold, re-checking until a fixpoint.

    Counts are per user across both domains and per (domain, item).
    """
    cur = list(inters)
    while True:
        ucount: dict = {}
        icount: dict = {}
        for it in cur:
            ucount[it.user] = ucount.get(it.user, 0) + 1
            key = (it.domain, it.item)
            icount[key] = icount.get(key, 0) + 1
        keep = [
            it
            for it in cur
            if ucount[it.user] >= min_interactions and icount[(it.domain, it.item)] >= min_interactions
        ]
        if len(keep) == len(cur):
            return keep
        cur = keep


def build_dataset(
    inters: list[Interaction],
    features_users: dict | None = None,
    features_items: dict | None = None,
    min_interactions: int = 5,
    interest_labels: dict | None = None,
    fallback_dim: int = 16,
) -> Dataset:
    """Construct the indexed dataset from parsed records.

    Features may be given per external id; entities missing from a provided
    table raise. With no table at all, a deterministic hashed fallback over
    the id string is used so the model always has an input representation.
    """
    inters = _normalize_ratings(inters)
    inters = filter_min_interactions(inters, min_interactions)
    if not inters:
        raise ContractError("dataset is empty after filtering")

    users_by_domain = {d: set() for d in DOMAINS}
    items_by_domain = {d: set() for d in DOMAINS}
    for it in inters:
        users_by_domain[it.domain].add(it.user)
        items_by_domain[it.domain].add(it.item)
    for d in DOMAINS:
        if not items_by_domain[d]:
            raise ContractError(f"domain {d} has no interactions after filtering")

    all_users = sorted(users_by_domain["S"] | users_by_domain["T"])
    uindex = {u: i for i, u in enumerate(all_users)}
    role = np.empty(len(all_users), dtype="<U1")
    for u, i in uindex.items():
        in_s = u in users_by_domain["S"]
        in_t = u in users_by_domain["T"]
        role[i] = "o" if (in_s and in_t) else ("s" if in_s else "t")

    item_ids = {d: sorted(items_by_domain[d]) for d in DOMAINS}
    iindex = {d: {v: i for i, v in enumerate(item_ids[d])} for d in DOMAINS}

    pos: dict = {d: {} for d in DOMAINS}
    ts: dict = {d: {} for d in DOMAINS}
    raw: dict = {d: {} for d in DOMAINS}
    for it in inters:
        u = uindex[it.user]
        v = iindex[it.domain][it.item]
        raw[it.domain].setdefault(u, {})[v] = it.timestamp  # dedupe repeat pairs, keep last ts
    for d in DOMAINS:
        for u, items in raw[d].items():
            vs = np.array(sorted(items), dtype=np.int64)
            pos[d][u] = vs
            tvals = [items[v] for v in vs]
            ts[d][u] = None if any(t is None for t in tvals) else np.array(tvals, dtype=np.int64)

    def resolve(table: dict | None, ids: list, kind: str) -> np.ndarray:
        if table is not None:
            missing = [i for i in ids if i not in table]
            if missing:
                raise ContractError(f"feature table missing {kind} ids, e.g. {missing[0]!r}")
            return np.stack([table[i] for i in ids]).astype(np.float32)
        return np.stack([hashed_bow([i], fallback_dim) for i in ids]).astype(np.float32)

    fu = resolve(features_users, all_users, "user")
    fi = {d: resolve((features_items or {}).get(d), item_ids[d], f"item-{d}") for d in DOMAINS}

    labels = None
    if interest_labels is not None:
        rows = []
        for u in all_users:
            if u not in interest_labels:
                raise ContractError(f"interest labels missing user {u!r}")
            rows.append(interest_labels[u])
        labels = np.stack(rows).astype(np.float32)

    return Dataset(
        user_ids=all_users,
        role=role,
        item_ids=item_ids,
        pos=pos,
        ts=ts,
        features_users=fu,
        features_items=fi,
        interest_labels=labels,
        min_interactions=min_interactions,
    )


def load_dataset(data_dir, min_interactions: int = 5, fallback_dim: int = 16) -> Dataset:
    """Load a data directory: interactions.tsv plus optional feature/label files."""
    data_dir = Path(data_dir)
    ipath = data_dir / "interactions.tsv"
    if not ipath.exists():
        raise DataFormatError(f"{ipath}: not found")
    inters = load_interactions(ipath)
    fu = None
    upath = data_dir / "features_users.tsv"
    if upath.exists():
        fu = load_feature_table(upath)
    fi = {}
    for d in DOMAINS:
        p = data_dir / f"features_items_{d}.tsv"
        if p.exists():
            fi[d] = load_feature_table(p)
    labels = None
    lpath = data_dir / "labels.tsv"
    if lpath.exists():
        raw = load_feature_table(lpath)
        labels = raw
    return build_dataset(
        inters,
        features_users=fu,
        features_items=fi or None,
        min_interactions=min_interactions,
        interest_labels=labels,
        fallback_dim=fallback_dim,
    )


# -- featurization -------------------------------------------------------------------


def hashed_bow(tokens, n_buckets: int) -> np.ndarray:
    """Deterministic hashed bag-of-words, L2-normalized.

    crc32 is used instead of the builtin hash(), which is salted per process.
    """
    vec = np.zeros(n_buckets, dtype=np.float64)
    for tok in tokens:
        vec[zlib.crc32(tok.encode("utf-8")) % n_buckets] += 1.0
    n = np.linalg.norm(vec)
    return (vec / n if n > 0 else vec).astype(np.float32)


def featurize(rows: list[dict], schema: dict, d_feat: int, n_text_buckets: int = 64) -> np.ndarray:
    """Encode raw attribute rows into fixed-width vectors.

    `schema` maps column name to "numeric" | "categorical" | "text".
    Numeric columns are min-max scaled to [0,1]; categorical columns are
    one-hot over the observed sorted levels; text columns are hashed
    bag-of-words (whitespace tokens), L2-normalized. The concatenation is
    zero-padded or truncated to d_feat.
    """
    if not rows:
        return np.zeros((0, d_feat), dtype=np.float32)
    blocks = []
    for col, kind in schema.items():
        vals = [r.get(col) for r in rows]
        if kind == "numeric":
            arr = np.array([float(v) for v in vals], dtype=np.float64)[:, None]
            lo, hi = arr.min(), arr.max()
            blocks.append((arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr))
        elif kind == "categorical":
            levels = sorted({str(v) for v in vals})
            lut = {lv: i for i, lv in enumerate(levels)}
            oh = np.zeros((len(rows), len(levels)), dtype=np.float64)
            oh[np.arange(len(rows)), [lut[str(v)] for v in vals]] = 1.0
            blocks.append(oh)
        elif kind == "text":
            blocks.append(np.stack([hashed_bow(str(v).split(), n_text_buckets) for v in vals]).astype(np.float64))
        else:
            raise ContractError(f"featurize: unknown schema kind {kind!r} for column {col!r}")
    mat = np.concatenate(blocks, axis=1)
    if mat.shape[1] >= d_feat:
        mat = mat[:, :d_feat]
    else:
        mat = np.pad(mat, ((0, 0), (0, d_feat - mat.shape[1])))
    return mat.astype(np.float32)


# -- splits ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    """Per-domain leave-one-out test cases plus the remaining training positives."""

    test_users: dict  # domain -> np.ndarray of user indices
    test_pos: dict  # domain -> np.ndarray of held-out item indices
    test_negs: dict  # domain -> (n_test, 99) np.ndarray
    train_pos: dict  # domain -> dict(user index -> np.ndarray item indices)
    seed: int = 0
    policy: str = "latest_else_random"
    skipped: dict = field(default_factory=dict)  # domain -> count of users excluded

    N_NEG = 99

    def content_hash(self) -> str:
        h = hashlib.md5()
        for d in DOMAINS:
            h.update(d.encode())
            h.update(self.test_users[d].tobytes())
            h.update(self.test_pos[d].tobytes())
            h.update(self.test_negs[d].tobytes())
            for u in sorted(self.train_pos[d]):
                h.update(np.int64(u).tobytes())
                h.update(self.train_pos[d][u].tobytes())
        return h.hexdigest()

    def to_json_obj(self, ds: Dataset) -> dict:
        cases = {}
        for d in DOMAINS:
            cases[d] = [
                {
                    "user": ds.user_ids[int(u)],
                    "pos": ds.item_ids[d][int(p)],
                    "negs": [ds.item_ids[d][int(n)] for n in negs],
                }
                for u, p, negs in zip(self.test_users[d], self.test_pos[d], self.test_negs[d])
            ]
        return {"seed": self.seed, "policy": self.policy, "hash": self.content_hash(), "cases": cases}


def split_leave_one_out(ds: Dataset, seed: int, policy: str = "latest_else_random") -> SplitPlan:
    """Hold out one positive per (user, domain) with 99 clean negatives.

    The held-out item is the latest by timestamp when timestamps exist for
    that user (ties broken by item index), otherwise a seeded uniform pick.
    Users with fewer than 2 positives in a domain are excluded from that
    domain's test set and keep all their positives for training.
    """
    if policy not in ("latest_else_random", "random"):
        raise ContractError(f"unknown split policy {policy!r}")
    rng = seed_stream(seed, "split")
    test_users: dict = {}
    test_pos: dict = {}
    test_negs: dict = {}
    train_pos: dict = {}
    skipped: dict = {}
    for d in DOMAINS:
        n_items = ds.n_items(d)
        if n_items < SplitPlan.N_NEG + 1:
            raise ContractError(f"domain {d} has {n_items} items; need at least {SplitPlan.N_NEG + 1} to sample negatives")
        tu, tp, tn = [], [], []
        tr = {}
        skip = 0
        for u in sorted(ds.pos[d]):
            items = ds.pos[d][u]
            if len(items) < 2:
                tr[u] = items.copy()
                skip += 1
                continue
            tstamps = ds.ts[d].get(u)
            if policy == "latest_else_random" and tstamps is not None:
                best = int(np.lexsort((items, tstamps))[-1])
                held = int(items[best])
            else:
                held = int(items[rng.integers(len(items))])
            rest = items[items != held]
            free = np.ones(n_items, dtype=bool)
            free[items] = False
            pool = np.flatnonzero(free)
            if len(pool) < SplitPlan.N_NEG:
                tr[u] = items.copy()
                skip += 1
                continue
            negs = rng.choice(pool, size=SplitPlan.N_NEG, replace=False)
            tu.append(u)
            tp.append(held)
            tn.append(np.sort(negs))
            tr[u] = rest
        test_users[d] = np.array(tu, dtype=np.int64)
        test_pos[d] = np.array(tp, dtype=np.int64)
        test_negs[d] = np.stack(tn).astype(np.int64) if tn else np.zeros((0, SplitPlan.N_NEG), dtype=np.int64)
        train_pos[d] = tr
        skipped[d] = skip
    return SplitPlan(test_users, test_pos, test_negs, train_pos, seed=seed, policy=policy, skipped=skipped)


def split_from_json(ds: Dataset, obj: dict) -> SplitPlan:
    """Rebuild a split from its serialized form against the same dataset.

    Training positives are everything not held out. The embedded hash is
    verified so a split file cannot silently pair with the wrong data.
    """
    user_index = {u: i for i, u in enumerate(ds.user_ids)}
    item_index = {d: {v: i for i, v in enumerate(ds.item_ids[d])} for d in DOMAINS}
    test_users: dict = {}
    test_pos: dict = {}
    test_negs: dict = {}
    train_pos: dict = {}
    try:
        for d in DOMAINS:
            cases = obj["cases"][d]
            tu, tp, tn = [], [], []
            for case in cases:
                tu.append(user_index[case["user"]])
                tp.append(item_index[d][case["pos"]])
                tn.append([item_index[d][v] for v in case["negs"]])
            test_users[d] = np.array(tu, dtype=np.int64)
            test_pos[d] = np.array(tp, dtype=np.int64)
            test_negs[d] = (
                np.array(tn, dtype=np.int64) if tn else np.zeros((0, SplitPlan.N_NEG), dtype=np.int64)
            )
            held = dict(zip(tu, tp))
            tr = {}
            for u in sorted(ds.pos[d]):
                items = ds.pos[d][u]
                if u in held:
                    items = items[items != held[u]]
                tr[u] = items
            train_pos[d] = tr
    except KeyError as exc:
        raise DataFormatError(f"split file refers to unknown id {exc.args[0]!r}") from None
    plan = SplitPlan(
        test_users, test_pos, test_negs, train_pos,
        seed=int(obj.get("seed", 0)), policy=str(obj.get("policy", "latest_else_random")),
    )
    if "hash" in obj and obj["hash"] != plan.content_hash():
        raise DataFormatError("split file hash does not match this dataset")
    return plan


# -- training batches ------------------------------------------------------------------


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray  # domain-local item indices
    labels: np.ndarray  # float32 0/1
    domains: np.ndarray  # '<U1'

    def side(self, domain: str) -> np.ndarray:
        return np.flatnonzero(self.domains == domain)

    def __len__(self) -> int:
        return len(self.users)


def _flat_train_pairs(train_pos: dict) -> tuple[np.ndarray, np.ndarray]:
    us, vs = [], []
    for u in sorted(train_pos):
        items = train_pos[u]
        us.append(np.full(len(items), u, dtype=np.int64))
        vs.append(items)
    if not us:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(us), np.concatenate(vs)


class BatchSampler:
    """Draws training batches of positives plus `neg_ratio` negatives each.

    Positives are sampled uniformly over the union of both domains' train
    pairs, so domains are represented proportionally to their counts.
    Negatives are uniform over items the user never interacted with in
    that domain (resampled on collision).
    """

    def __init__(self, ds: Dataset, split: SplitPlan, neg_ratio: int, rng: np.random.Generator):
        if neg_ratio < 1:
            raise ContractError("neg_ratio must be >= 1")
        self.ds = ds
        self.neg_ratio = int(neg_ratio)
        self.rng = rng
        self.pairs = {d: _flat_train_pairs(split.train_pos[d]) for d in DOMAINS}
        self.n_pos = {d: len(self.pairs[d][0]) for d in DOMAINS}
        self.total_pos = sum(self.n_pos.values())
        # full observed sets (train + held out) keep test positives out of negatives
        self.observed = {d: {u: set(items.tolist()) for u, items in ds.pos[d].items()} for d in DOMAINS}

    def draw(self, n_positives: int) -> Batch:
        if self.total_pos == 0:
            raise ContractError("no training positives to sample")
        take = self.rng.integers(self.total_pos, size=n_positives)
        split_at = self.n_pos["S"]
        users, items, labels, doms = [], [], [], []
        for t in take:
            d, off = ("S", int(t)) if t < split_at else ("T", int(t) - split_at)
            u = int(self.pairs[d][0][off])
            v = int(self.pairs[d][1][off])
            users.append(u)
            items.append(v)
            labels.append(1.0)
            doms.append(d)
            seen = self.observed[d][u]
            n_items = self.ds.n_items(d)
            for _ in range(self.neg_ratio):
                while True:
                    cand = int(self.rng.integers(n_items))
                    if cand not in seen:
                        break
                users.append(u)
                items.append(cand)
                labels.append(0.0)
                doms.append(d)
        return Batch(
            users=np.array(users, dtype=np.int64),
            items=np.array(items, dtype=np.int64),
            labels=np.array(labels, dtype=np.float32),
            domains=np.array(doms, dtype="<U1"),
        )


def sample_training_batch(ds: Dataset, split: SplitPlan, batch_size: int, neg_ratio: int, seed: int) -> Batch:
    """One-shot batch draw; `batch_size` counts positives."""
    return BatchSampler(ds, split, neg_ratio, seed_stream(seed, "batch")).draw(batch_size)


# -- synthetic data ---------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Latent-interest simulator settings.

    Overlapping users draw a single interest mixture used in both domains;
    distinct users draw their own. Items get one primary interest each.
    mean_interactions is per domain, letting one domain be sparser.
    """

    n_users_s: int = 1400
    n_users_t: int = 1400
    n_overlap: int = 600
    n_items: dict = field(default_factory=lambda: {"S": 1000, "T": 1000})
    n_interests: int = 8
    mean_interactions: dict = field(default_factory=lambda: {"S": 30.0, "T": 10.0})
    temperature: float = 0.15
    feature_noise: float = 0.25
    feature_dim: int = 16
    mixture_alpha: float = 0.25
    user_feature_signal: float = 1.0
    seed: int = 0

    def validate(self):
        if min(self.n_users_s, self.n_users_t, self.n_overlap, self.n_interests) <= 0:
            raise ContractError("synth: all counts must be positive")
        if any(v <= 0 for v in self.n_items.values()) or any(v <= 0 for v in self.mean_interactions.values()):
            raise ContractError("synth: item counts and interaction means must be positive")
        if self.n_overlap > min(self.n_users_s + self.n_overlap, self.n_users_t + self.n_overlap):
            raise ContractError("synth: overlap larger than a domain's user set")
        if self.feature_dim < self.n_interests:
            raise ContractError("synth: feature_dim must hold the interest indicator")
        if self.user_feature_signal < 0.0:
            raise ContractError("synth: user_feature_signal must be >= 0")


def _quantize(a: np.ndarray) -> np.ndarray:
    """Snap to a 1/1024 grid so values survive text round trips exactly."""
    return (np.round(a * 1024.0) / 1024.0).astype(np.float32)


def synth_generate(cfg: SynthConfig):
    """Simulate a dual-domain dataset with known shared interests.

    Returns (interactions, feature tables, labels dict). Interactions carry
    ratings on a 1..5 scale and a per-user timestamp order, so both the
    normalization and the latest-item split paths get exercised.
    """
    cfg.validate()
    rng = seed_stream(cfg.seed, "synth")
    K = cfg.n_interests

    uid_s = [f"us{i:05d}" for i in range(cfg.n_users_s)]
    uid_o = [f"uo{i:05d}" for i in range(cfg.n_overlap)]
    uid_t = [f"ut{i:05d}" for i in range(cfg.n_users_t)]
    users_by_domain = {"S": uid_s + uid_o, "T": uid_o + uid_t}
    all_users = uid_s + uid_o + uid_t

    mixtures = {u: rng.dirichlet(np.full(K, cfg.mixture_alpha)) for u in all_users}

    item_ids = {d: [f"i{d}{i:05d}" for i in range(cfg.n_items[d])] for d in DOMAINS}
    item_cluster = {d: rng.integers(K, size=cfg.n_items[d]) for d in DOMAINS}

    interactions = []
    for d in DOMAINS:
        clusters = item_cluster[d]
        n_items = cfg.n_items[d]
        for u in users_by_domain[d]:
            aff = mixtures[u][clusters]
            p = np.exp(aff / cfg.temperature)
            p /= p.sum()
            n_u = max(2, int(rng.poisson(cfg.mean_interactions[d])))
            n_u = min(n_u, n_items)
            chosen = rng.choice(n_items, size=n_u, replace=False, p=p)
            order = rng.permutation(n_u)
            for t, v in enumerate(chosen):
                rating = 1.0 + 4.0 * float(aff[v] > np.median(aff))
                interactions.append(Interaction(u, item_ids[d][v], d, rating, int(order[t])))

    feat_users = {}
    for u in all_users:
        base = np.zeros(cfg.feature_dim)
        # signal 0 leaves only noise, so user identity must be inferred
        # from interactions; item features stay informative either way
        base[:K] = mixtures[u] * cfg.user_feature_signal
        noise = rng.normal(0.0, cfg.feature_noise, size=cfg.feature_dim)
        feat_users[u] = _quantize(base + noise)
    feat_items = {d: {} for d in DOMAINS}
    for d in DOMAINS:
        for idx, vid in enumerate(item_ids[d]):
            base = np.zeros(cfg.feature_dim)
            base[item_cluster[d][idx]] = 1.0
            noise = rng.normal(0.0, cfg.feature_noise, size=cfg.feature_dim)
            feat_items[d][vid] = _quantize(base + noise)

    labels = {u: _quantize(mixtures[u]) for u in all_users}
    return interactions, {"users": feat_users, "items": feat_items}, labels


def synth_dataset(cfg: SynthConfig, min_interactions: int = 5) -> Dataset:
    inters, feats, labels = synth_generate(cfg)
    return build_dataset(
        inters,
        features_users=feats["users"],
        features_items=feats["items"],
        min_interactions=min_interactions,
        interest_labels=labels,
    )


# -- writers -------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(out_dir, interactions, features, labels=None) -> dict:
    """Write the raw-file form of a dataset; returns simple counts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "interactions.tsv", "w", encoding="utf-8") as fh:
        for it in interactions:
            ts = "" if it.timestamp is None else f"\t{it.timestamp}"
            fh.write(f"{it.user}\t{it.item}\t{it.domain}\t{_fmt(it.rating)}{ts}\n")
    with open(out_dir / "features_users.tsv", "w", encoding="utf-8") as fh:
        for uid in sorted(features["users"]):
            fh.write(uid + "\t" + ",".join(_fmt(v) for v in features["users"][uid]) + "\n")
    for d in DOMAINS:
        with open(out_dir / f"features_items_{d}.tsv", "w", encoding="utf-8") as fh:
            for vid in sorted(features["items"][d]):
                fh.write(vid + "\t" + ",".join(_fmt(v) for v in features["items"][d][vid]) + "\n")
    if labels is not None:
        with open(out_dir / "labels.tsv", "w", encoding="utf-8") as fh:
            for uid in sorted(labels):
                fh.write(uid + "\t" + ",".join(_fmt(v) for v in labels[uid]) + "\n")
    counts = {
        "interactions": len(interactions),
        "users": len(features["users"]),
        "items": {d: len(features["items"][d]) for d in DOMAINS},
    }
    return counts


def prepare_dataset(
    interactions_path,
    out_dir,
    user_features_path=None,
    item_features_paths: dict | None = None,
    min_interactions: int = 5,
    fallback_dim: int = 16,
) -> dict:
    """Filter and normalize raw files into a canonical data directory."""
    inters = load_interactions(interactions_path)
    fu = load_feature_table(user_features_path) if user_features_path else None
    fi = {}
    for d, p in (item_features_paths or {}).items():
        fi[d] = load_feature_table(p)
    ds = build_dataset(inters, features_users=fu, features_items=fi or None,
                       min_interactions=min_interactions, fallback_dim=fallback_dim)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kept = []
    for d in DOMAINS:
        for u in sorted(ds.pos[d]):
            items = ds.pos[d][u]
            tstamps = ds.ts[d].get(u)
            for j, v in enumerate(items):
                ts = None if tstamps is None else int(tstamps[j])
                kept.append(Interaction(ds.user_ids[u], ds.item_ids[d][v], d, 1.0, ts))
    features = {
        "users": {uid: ds.features_users[i] for i, uid in enumerate(ds.user_ids)},
        "items": {d: {vid: ds.features_items[d][i] for i, vid in enumerate(ds.item_ids[d])} for d in DOMAINS},
    }
    write_dataset(out_dir, kept, features)
    stats = ds.stats()
    stats["dataset_hash"] = ds.content_hash()
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    return stats
