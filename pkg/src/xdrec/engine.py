"""Training and evaluation engine.

Wires the pieces together: configuration, parameter initialization,
the optimization loop over joint supervised + alignment objectives,
leave-one-out ranking evaluation, and the experiment runners built
on top (ablations, overlap sensitivity, hyperparameter sweeps).
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import align as align_mod
from . import gcn as gcn_mod
from . import towers as towers_mod
from .dataio import (
    Batch,
    BatchSampler,
    Dataset,
    SplitPlan,
    canonical_json,
    md5_hex,
    seed_stream,
    split_leave_one_out,
)
from .tensor import (
    ContractError,
    ParamSet,
    Tensor,
    add,
    backward,
    concat,
    load_checkpoint,
    matmul,
    mul,
    no_grad,
    save_checkpoint,
    take_rows,
)
from .xgraph import CrossDomainGraph, DOMAINS, build_graph


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """Hyperparameters and switches for one training run.

    The boolean switches remove individual model components so that
    their contribution can be measured; everything else is a plain
    hyperparameter. ``overlap_ratio`` keeps only that fraction of the
    shared users linked across domains and severs the rest.
    """

    embed_dim: int = 64
    gcn_layers: int = 2
    n_interests: int = 256
    temperature: float = 0.1
    reg_weight: float = 1e-2
    align_weight: float = 1e-2
    learning_rate: float = 5e-4
    batch_size: int = 4096
    epochs: int = 100
    neg_ratio: int = 4
    seed: int = 0
    proj_dim: int = 64
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 3
    grad_align_params: str = "all"
    split_policy: str = "latest_else_random"
    steps_per_epoch: int = 0
    overlap_ratio: float = 1.0
    free_embeddings: bool = False
    separate_graphs: bool = False
    no_interaction_terms: bool = False
    no_user_alignment: bool = False
    no_item_alignment: bool = False
    literal_first_term: bool = False

    def validate(self) -> None:
        if self.embed_dim < 1 or self.gcn_layers < 0:
            raise ContractError("embed_dim must be >= 1 and gcn_layers >= 0")
        if self.n_interests < 2:
            raise ContractError("n_interests must be >= 2")
        for name in ("temperature", "learning_rate", "sinkhorn_eps"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        for name in ("reg_weight", "align_weight"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.neg_ratio < 1:
            raise ContractError("batch_size/epochs/neg_ratio out of range")
        if self.sinkhorn_iters < 1 or self.proj_dim < 1:
            raise ContractError("sinkhorn_iters and proj_dim must be >= 1")
        if self.grad_align_params not in ("all", "last_layer"):
            raise ContractError("grad_align_params must be 'all' or 'last_layer'")
        if self.split_policy not in ("latest_else_random", "random"):
            raise ContractError("unknown split_policy")
        if not 0.0 < self.overlap_ratio <= 1.0:
            raise ContractError("overlap_ratio must be in (0, 1]")
        if self.steps_per_epoch < 0:
            raise ContractError("steps_per_epoch must be >= 0 (0 = full pass)")

    def to_json_obj(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return md5_hex(canonical_json(self.to_json_obj()))


# ---------------------------------------------------------------------------
# model assembly


@dataclass
class ModelState:
    """Everything needed to run the model: weights, graph, config."""

    params: ParamSet
    graph: CrossDomainGraph
    cfg: TrainConfig
    ds: Dataset
    split: SplitPlan
    d_prop: int = 0

    def propagate(self) -> Tensor:
        e0 = initial_embeddings(self)
        return gcn_mod.propagate(
            self.graph,
            e0,
            self.params,
            self.cfg.gcn_layers,
            no_interaction=self.cfg.no_interaction_terms,
            literal_first_term=self.cfg.literal_first_term,
        )


def severed_users(ds: Dataset, cfg: TrainConfig) -> np.ndarray | None:
    """Seeded choice of shared users whose cross-domain link is cut."""
    if cfg.overlap_ratio >= 1.0:
        return None
    overlap = ds.overlap_users
    n_cut = int(round((1.0 - cfg.overlap_ratio) * overlap.size))
    if n_cut == 0:
        return None
    rng = seed_stream(cfg.seed, "sever")
    cut = rng.choice(overlap, size=n_cut, replace=False)
    return np.sort(cut.astype(np.int64))


def make_model(ds: Dataset, cfg: TrainConfig, split: SplitPlan) -> ModelState:
    cfg.validate()
    severed = severed_users(ds, cfg)
    graph = build_graph(
        ds,
        pos=split.train_pos,
        duplicate_users=severed,
        duplicate_all_overlap=cfg.separate_graphs,
        merge_at_eval=cfg.separate_graphs,
        dtype=np.float32,
    )
    params = ParamSet()
    rng = seed_stream(cfg.seed, "init")
    dim = cfg.embed_dim
    if cfg.free_embeddings or graph.features is None:
        std = math.sqrt(2.0 / dim)
        table = rng.normal(0.0, std, size=(graph.n_nodes, dim))
        params.add("emb.free", Tensor(table.astype(np.float32), requires_grad=True))
    else:
        for key, name in (("users", "user"), ("S", "item_s"), ("T", "item_t")):
            d_in = graph.features[key].shape[1]
            std = math.sqrt(2.0 / d_in)
            w = rng.normal(0.0, std, size=(d_in, dim))
            params.add(f"emb.{name}_proj.w", Tensor(w.astype(np.float32), requires_grad=True))
            params.add(f"emb.{name}_proj.b", Tensor(np.zeros((1, dim), np.float32), requires_grad=True))
    params.merge(gcn_mod.init_gcn_params(cfg.gcn_layers, dim, rng, dtype=np.float32))
    d_prop = dim * (cfg.gcn_layers + 1)
    towers_mod.init_towers(params, d_prop, rng, dtype=np.float32)
    align_mod.init_align_params(
        params, d_prop, cfg.proj_dim, cfg.n_interests, rng, dtype=np.float32
    )
    return ModelState(params=params, graph=graph, cfg=cfg, ds=ds, split=split, d_prop=d_prop)


def initial_embeddings(model: ModelState) -> Tensor:
    """Layer-0 node matrix: projected features or a free table."""
    params, graph = model.params, model.graph
    if "emb.free" in params:
        return params["emb.free"]
    feats = graph.features
    blocks = []
    for key, name in (("users", "user"), ("S", "item_s"), ("T", "item_t")):
        x = Tensor(feats[key])
        w = params[f"emb.{name}_proj.w"]
        b = params[f"emb.{name}_proj.b"]
        blocks.append(add(matmul(x, w), b))
    return concat(blocks, axis=0)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params: ParamSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, params: ParamSet, grads: ParamSet) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name].data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= (self.lr / bc1) * (m / denom)


# ---------------------------------------------------------------------------
# loss assembly for one batch


def batch_losses(model: ModelState, batch: Batch) -> dict:
    """All loss terms for one batch on a fresh forward pass.

    Returns tensors keyed ``total``/``supervised``/``user_user``/
    ``user_item``; alignment keys are absent when the term is off or
    the batch has no usable overlap rows, and the total is then built
    without them so switched-off and zero-weight runs match bitwise.
    """
    cfg, graph, params = model.cfg, model.graph, model.params
    e_all = model.propagate()

    per_domain = {}
    for d in DOMAINS:
        idx = batch.side(d)
        if idx.size == 0:
            continue
        u_nodes = graph.user_side_node(d, batch.users[idx])
        v_nodes = graph.item_node(d, batch.items[idx])
        u_emb = take_rows(e_all, u_nodes)
        v_emb = take_rows(e_all, v_nodes)
        y = Tensor(batch.labels[idx].astype(e_all.data.dtype).reshape(-1, 1))
        per_domain[d] = (u_emb, v_emb, y)
    loss_s = towers_mod.supervised_loss(params, per_domain, cfg.reg_weight)

    out = {"supervised": loss_s}
    lam = cfg.align_weight
    overlap = graph.overlap_users

    if lam > 0 and not cfg.no_user_alignment and overlap.size:
        uu_users = np.unique(batch.users[np.isin(batch.users, overlap)])
        if uu_users.size >= 2:
            views = align_mod.build_views(graph, e_all, uu_users)
            out["user_user"] = align_mod.user_user_loss(
                params,
                views["S"],
                views["T"],
                temperature=cfg.temperature,
                sinkhorn_eps=cfg.sinkhorn_eps,
                sinkhorn_iters=cfg.sinkhorn_iters,
            )

    if lam > 0 and not cfg.no_item_alignment and overlap.size:
        grads = {}
        for d in DOMAINS:
            idx = batch.side(d)
            idx = idx[np.isin(batch.users[idx], overlap)]
            if idx.size == 0:
                grads = {}
                break
            u_nodes = graph.user_side_node(d, batch.users[idx])
            v_nodes = graph.item_node(d, batch.items[idx])
            grads[d] = align_mod.grad_vector(
                params,
                d,
                take_rows(e_all, u_nodes),
                take_rows(e_all, v_nodes),
                Tensor(batch.labels[idx].astype(e_all.data.dtype).reshape(-1, 1)),
                which=cfg.grad_align_params,
            )
        if len(grads) == 2:
            zero_s = not np.any(grads["S"].data)
            zero_t = not np.any(grads["T"].data)
            # one-sided zero gradient carries no direction to align with
            if not (zero_s != zero_t):
                out["user_item"] = align_mod.user_item_loss(grads["S"], grads["T"])

    terms = [out[k] for k in ("user_user", "user_item") if k in out]
    if terms:
        align_sum = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
        out["total"] = add(loss_s, mul(align_sum, lam))
    else:
        out["total"] = loss_s
    return out


# ---------------------------------------------------------------------------
# training loop


def train(ds: Dataset, cfg: TrainConfig, split: SplitPlan | None = None,
          log=None) -> tuple[ModelState, dict]:
    """Fit a model on the training split; returns (model, history).

    ``history`` holds per-epoch means of each loss component plus
    timing, and is JSON-ready.
    """
    cfg.validate()
    if split is None:
        split = split_leave_one_out(ds, cfg.seed, policy=cfg.split_policy)
    model = make_model(ds, cfg, split)
    opt = Adam(model.params, cfg.learning_rate)

    n_pos = sum(int(v.size) for d in DOMAINS for v in split.train_pos[d].values())
    steps = cfg.steps_per_epoch or max(1, math.ceil(n_pos / cfg.batch_size))
    rng = seed_stream(cfg.seed, "batch")
    sampler = BatchSampler(ds, split, cfg.neg_ratio, rng)

    history = {
        "epochs": [],
        "config_hash": cfg.config_hash(),
        "dataset_hash": ds.content_hash(),
        "split_hash": split.content_hash(),
    }
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        sums = {"total": 0.0, "supervised": 0.0, "user_user": 0.0, "user_item": 0.0}
        counts = {k: 0 for k in sums}
        for step in range(steps):
            batch = sampler.draw(cfg.batch_size)
            losses = batch_losses(model, batch)
            total = losses["total"]
            val = total.item()
            if not math.isfinite(val):
                raise DivergenceError(
                    f"non-finite loss {val!r} at epoch {epoch + 1} step {step + 1}"
                )
            grads = backward(total, model.params)
            opt.step(model.params, grads)
            align_mod.renormalize_prototypes(model.params)
            for key in sums:
                if key in losses:
                    sums[key] += losses[key].item()
                    counts[key] += 1
        row = {"epoch": epoch + 1}
        for key in sums:
            row[key] = (sums[key] / counts[key]) if counts[key] else None
        history["epochs"].append(row)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {row['total']:.5f}")
    history["train_seconds"] = time.perf_counter() - t0
    return model, history


# ---------------------------------------------------------------------------
# evaluation


MAX_EVAL_ITEMS = 10


def _eval_workers() -> int:
    cap = os.environ.get("COAST_THREADS", "")
    workers = min(4, os.cpu_count() or 1)
    if cap.strip():
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ContractError(f"COAST_THREADS must be an integer, got {cap!r}")
    return workers


def rank_of_positive(scores: np.ndarray, candidates: np.ndarray) -> int:
    """Rank of candidate 0; ties resolved toward the lower item index."""
    pos_score = scores[0]
    pos_item = candidates[0]
    higher = int(np.sum(scores[1:] > pos_score))
    tied_ahead = int(np.sum((scores[1:] == pos_score) & (candidates[1:] < pos_item)))
    return 1 + higher + tied_ahead


def _pair_scores(zu_row: np.ndarray, zi_rows: np.ndarray) -> np.ndarray:
    # float64 accumulation then cast, matching the tensor-op reduction rule
    cos = (zi_rows.astype(np.float64) @ zu_row.astype(np.float64)).astype(zu_row.dtype)
    one = zu_row.dtype.type(1)
    half = zu_row.dtype.type(0.5)
    raw = (cos + one) * half
    return np.clip(raw, 1e-7, 1.0 - 1e-7)


@dataclass
class EvalReport:
    """Ranking metrics per domain with provenance hashes attached."""

    domains: dict
    seed: int
    config_hash: str
    graph: dict
    wall_time: float = 0.0

    def to_json_obj(self) -> dict:
        obj = {
            "domains": self.domains,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "graph": self.graph,
        }
        obj["report_hash"] = md5_hex(canonical_json(obj))
        obj["wall_time"] = self.wall_time
        return obj

    def report_hash(self) -> str:
        return self.to_json_obj()["report_hash"]

    def hit(self, domain: str, n: int = 10) -> float:
        return self.domains[domain]["hit"][n - 1]

    def ndcg(self, domain: str, n: int = 10) -> float:
        return self.domains[domain]["ndcg"][n - 1]


def _metrics_from_ranks(ranks: np.ndarray) -> dict:
    n_test = int(ranks.size)
    hits = []
    ndcgs = []
    for n in range(1, MAX_EVAL_ITEMS + 1):
        inside = ranks <= n
        hits.append(float(np.mean(inside.astype(np.float64))) if n_test else 0.0)
        gains = np.where(inside, 1.0 / np.log2(ranks + 1.0), 0.0)
        ndcgs.append(float(np.mean(gains)) if n_test else 0.0)
    return {"hit": hits, "ndcg": ndcgs, "n_test": n_test}


def evaluate(model: ModelState, split: SplitPlan | None = None) -> EvalReport:
    """Leave-one-out ranking over positive + sampled negatives."""
    if split is None:
        split = model.split
    cfg, graph, params = model.cfg, model.graph, model.params
    t0 = time.perf_counter()
    with no_grad():
        e_all = model.propagate()
    en = e_all.data

    domains = {}
    for d in DOMAINS:
        users = split.test_users[d]
        if users.size == 0:
            domains[d] = _metrics_from_ranks(np.zeros(0, np.int64))
            continue
        u_name, v_name = towers_mod.tower_names(d)
        all_items = np.arange(model.ds.n_items(d), dtype=np.int64)
        with no_grad():
            zi = towers_mod.tower_forward(
                params, v_name, Tensor(en[graph.item_node(d, all_items)])
            ).data
            side_rows = graph.user_side_node(d, users)
            u_in = en[side_rows]
            rows_a, rows_b, merged = graph.repr_rows(users)
            if np.any(merged):
                # merge duplicated copies before the tower so outputs stay unit-norm
                u_in = u_in.copy()
                u_in[merged] = np.maximum(en[rows_a[merged]], en[rows_b[merged]])
            zu = towers_mod.tower_forward(params, u_name, Tensor(u_in)).data
        pos = split.test_pos[d]
        negs = split.test_negs[d]

        def _ranks(lo: int, hi: int) -> np.ndarray:
            out = np.zeros(hi - lo, dtype=np.int64)
            for i in range(lo, hi):
                cand = np.concatenate(([pos[i]], negs[i]))
                scores = _pair_scores(zu[i], zi[cand])
                out[i - lo] = rank_of_positive(scores, cand)
            return out

        n = users.size
        workers = _eval_workers()
        if workers <= 1 or n < 64:
            ranks = _ranks(0, n)
        else:
            chunk = math.ceil(n / workers)
            bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda b: _ranks(*b), bounds))
            ranks = np.concatenate(parts)
        domains[d] = _metrics_from_ranks(ranks)

    report = EvalReport(
        domains=domains,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
        graph=graph.stats(),
    )
    report.wall_time = time.perf_counter() - t0
    return report


def evaluate_scored(split: SplitPlan, score_fn, seed: int = 0,
                    label: str = "baseline") -> EvalReport:
    """Rank with an arbitrary scoring function; used for baselines.

    ``score_fn(domain, user, candidates, rng) -> scores`` must return
    one score per candidate.
    """
    rng = seed_stream(seed, f"baseline.{label}")
    domains = {}
    for d in DOMAINS:
        users = split.test_users[d]
        ranks = np.zeros(users.size, dtype=np.int64)
        for i, u in enumerate(users):
            cand = np.concatenate(([split.test_pos[d][i]], split.test_negs[d][i]))
            scores = np.asarray(score_fn(d, int(u), cand, rng), dtype=np.float64)
            ranks[i] = rank_of_positive(scores, cand)
        domains[d] = _metrics_from_ranks(ranks)
    return EvalReport(domains=domains, seed=seed, config_hash=label, graph={})


def random_baseline(split: SplitPlan, seed: int = 0) -> EvalReport:
    return evaluate_scored(
        split, lambda d, u, cand, rng: rng.random(cand.size), seed, "random"
    )


def popularity_baseline(ds: Dataset, split: SplitPlan) -> EvalReport:
    counts = {}
    for d in DOMAINS:
        c = np.zeros(ds.n_items(d), dtype=np.float64)
        for items in split.train_pos[d].values():
            c[items] += 1.0
        counts[d] = c
    return evaluate_scored(
        split, lambda d, u, cand, rng: counts[d][cand], 0, "popularity"
    )


# ---------------------------------------------------------------------------
# persistence


def save_model(model: ModelState, path: str) -> None:
    meta = {
        "config": model.cfg.to_json_obj(),
        "dataset_hash": model.ds.content_hash(),
        "split_hash": model.split.content_hash(),
        "d_prop": model.d_prop,
    }
    arrays = {name: p.data for name, p in model.params.items()}
    save_checkpoint(path, arrays, meta)


def load_model(path: str, ds: Dataset, split: SplitPlan | None = None) -> ModelState:
    """Rebuild a model from a checkpoint against the same dataset."""
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig(**meta["config"])
    if meta["dataset_hash"] != ds.content_hash():
        raise ContractError("checkpoint was trained on a different dataset")
    if split is None:
        split = split_leave_one_out(ds, cfg.seed, policy=cfg.split_policy)
    if meta["split_hash"] != split.content_hash():
        raise ContractError("checkpoint was trained on a different split")
    model = make_model(ds, cfg, split)
    names = list(model.params.names())
    if sorted(names) != sorted(arrays):
        raise ContractError("checkpoint parameter names do not match the config")
    for name in names:
        arr = arrays[name]
        p = model.params[name]
        if arr.shape != p.data.shape:
            raise ContractError(f"checkpoint shape mismatch for {name}")
        p.data = arr.astype(p.data.dtype)
    return model


# ---------------------------------------------------------------------------
# experiment runners


ABLATIONS = ("full", "no_merge", "no_interaction", "no_user_align",
             "no_item_align", "no_alignment")


def ablation_config(cfg: TrainConfig, name: str) -> TrainConfig:
    if name == "full":
        return replace(cfg)
    if name == "no_merge":
        return replace(cfg, separate_graphs=True)
    if name == "no_interaction":
        return replace(cfg, no_interaction_terms=True)
    if name == "no_user_align":
        return replace(cfg, no_user_alignment=True)
    if name == "no_item_align":
        return replace(cfg, no_item_alignment=True)
    if name == "no_alignment":
        return replace(cfg, no_user_alignment=True, no_item_alignment=True)
    raise ContractError(f"unknown ablation {name!r}")


def _run_one(ds: Dataset, cfg: TrainConfig, split: SplitPlan | None, log=None) -> dict:
    model, history = train(ds, cfg, split=split, log=log)
    report = evaluate(model)
    return {
        "config": cfg.to_json_obj(),
        "report": report.to_json_obj(),
        "history": history,
    }


def run_ablation(ds: Dataset, cfg: TrainConfig, names=ABLATIONS, log=None) -> dict:
    """Train each model variant on the same split and compare metrics."""
    split = split_leave_one_out(ds, cfg.seed, policy=cfg.split_policy)
    out = {"dataset_hash": ds.content_hash(), "variants": {}}
    for name in names:
        if log is not None:
            log(f"ablation variant: {name}")
        out["variants"][name] = _run_one(ds, ablation_config(cfg, name), split, log=log)
    return out


OVERLAP_RATIOS = (0.25, 0.5, 0.75, 1.0)


def run_overlap(ds: Dataset, cfg: TrainConfig, ratios=OVERLAP_RATIOS, log=None) -> dict:
    """Metric sensitivity to the fraction of users linked across domains."""
    split = split_leave_one_out(ds, cfg.seed, policy=cfg.split_policy)
    out = {"dataset_hash": ds.content_hash(), "ratios": {}}
    for ratio in ratios:
        if not 0.0 < ratio <= 1.0:
            raise ContractError("overlap ratios must be in (0, 1]")
        if log is not None:
            log(f"overlap ratio: {ratio}")
        run_cfg = replace(cfg, overlap_ratio=float(ratio))
        out["ratios"][str(ratio)] = _run_one(ds, run_cfg, split, log=log)
    return out


SWEEP_GRIDS = {
    "embed_dim": (8, 16, 32, 64, 128, 256),
    "n_interests": (32, 64, 128, 256, 512, 1024),
    "align_weight": (1e-4, 1e-3, 1e-2, 1e-1, 1.0),
}


def run_sweep(ds: Dataset, cfg: TrainConfig, param: str, values=None, log=None) -> dict:
    """One-dimensional hyperparameter sweep, other settings fixed."""
    if values is None:
        if param not in SWEEP_GRIDS:
            raise ContractError(
                f"no default grid for {param!r}; pass values explicitly"
            )
        values = SWEEP_GRIDS[param]
    if not hasattr(TrainConfig, "__dataclass_fields__") or param not in TrainConfig.__dataclass_fields__:
        raise ContractError(f"unknown hyperparameter {param!r}")
    split = split_leave_one_out(ds, cfg.seed, policy=cfg.split_policy)
    out = {"dataset_hash": ds.content_hash(), "param": param, "values": {}}
    for value in values:
        if log is not None:
            log(f"sweep {param} = {value}")
        run_cfg = replace(cfg, **{param: value})
        out["values"][str(value)] = _run_one(ds, run_cfg, split, log=log)
    return out
