"""Scikit-learn style estimator facade over the engine.

Wraps dataset coercion, training, and scoring behind the familiar
``fit`` / ``predict`` / ``score`` surface so the model slots into
pipelines and grid-search tooling.
"""

from __future__ import annotations

from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataio import Dataset, Interaction, build_dataset, load_dataset
from .engine import TrainConfig, evaluate, train
from .tensor import ContractError, Tensor, no_grad
from .towers import predict as pair_predict
from .towers import tower_names

__all__ = ["CrossDomainRecommender", "as_dataset"]

_CONFIG_FIELDS = tuple(f.name for f in dataclass_fields(TrainConfig))


def as_dataset(X, min_interactions: int = 5) -> Dataset:
    """Coerce estimator input into a Dataset.

    Accepts a Dataset, a data directory path, or a sequence of
    interaction records (user, item, domain, rating[, timestamp]).
    """
    if isinstance(X, Dataset):
        return X
    if isinstance(X, (str, Path)):
        return load_dataset(X, min_interactions=min_interactions)
    try:
        records = list(X)
    except TypeError:
        raise ContractError(f"cannot interpret {type(X).__name__} as a dataset")
    inters = []
    for i, row in enumerate(records):
        row = tuple(row)
        if len(row) not in (4, 5):
            raise ContractError(
                f"record {i}: expected (user, item, domain, rating[, timestamp]), got {len(row)} fields"
            )
        user, item, domain, rating = row[:4]
        ts = int(row[4]) if len(row) == 5 else None
        inters.append(Interaction(str(user), str(item), str(domain), float(rating), ts))
    return build_dataset(inters, min_interactions=min_interactions)


class CrossDomainRecommender(BaseEstimator):
    """Dual-domain recommender with graph propagation and tower scoring.

    Hyperparameters mirror the training configuration one to one;
    ``fit`` accepts anything `as_dataset` understands. ``predict``
    scores (user, item, domain) triples by external id and ``score``
    reports the mean top-10 hit rate over the held-out split.
    """

    def __init__(
        self,
        embed_dim: int = 64,
        gcn_layers: int = 2,
        n_interests: int = 256,
        temperature: float = 0.1,
        reg_weight: float = 1e-2,
        align_weight: float = 1e-2,
        learning_rate: float = 5e-4,
        batch_size: int = 4096,
        epochs: int = 100,
        neg_ratio: int = 4,
        seed: int = 0,
        proj_dim: int = 64,
        sinkhorn_eps: float = 0.05,
        sinkhorn_iters: int = 3,
        grad_align_params: str = "all",
        split_policy: str = "latest_else_random",
        steps_per_epoch: int = 0,
        overlap_ratio: float = 1.0,
        free_embeddings: bool = False,
        separate_graphs: bool = False,
        no_interaction_terms: bool = False,
        no_item_alignment: bool = False,
        no_user_alignment: bool = False,
        literal_first_term: bool = False,
        min_interactions: int = 5,
    ):
        self.embed_dim = embed_dim
        self.gcn_layers = gcn_layers
        self.n_interests = n_interests
        self.temperature = temperature
        self.reg_weight = reg_weight
        self.align_weight = align_weight
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.neg_ratio = neg_ratio
        self.seed = seed
        self.proj_dim = proj_dim
        self.sinkhorn_eps = sinkhorn_eps
        self.sinkhorn_iters = sinkhorn_iters
        self.grad_align_params = grad_align_params
        self.split_policy = split_policy
        self.steps_per_epoch = steps_per_epoch
        self.overlap_ratio = overlap_ratio
        self.free_embeddings = free_embeddings
        self.separate_graphs = separate_graphs
        self.no_interaction_terms = no_interaction_terms
        self.no_item_alignment = no_item_alignment
        self.no_user_alignment = no_user_alignment
        self.literal_first_term = literal_first_term
        self.min_interactions = min_interactions

    # -- sklearn plumbing ---------------------------------------------------

    def _train_config(self) -> TrainConfig:
        cfg = TrainConfig(**{name: getattr(self, name) for name in _CONFIG_FIELDS})
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        ds = as_dataset(X, min_interactions=self.min_interactions)
        cfg = self._train_config()
        self.dataset_ = ds
        self.model_, self.history_ = train(ds, cfg)
        self.user_index_ = {u: i for i, u in enumerate(ds.user_ids)}
        self.item_index_ = {
            d: {v: i for i, v in enumerate(ds.item_ids[d])} for d in ("S", "T")
        }
        return self

    def predict(self, X) -> np.ndarray:
        """Interaction probabilities for (user_id, item_id, domain) triples."""
        check_is_fitted(self, "model_")
        rows = [tuple(r) for r in X]
        for i, row in enumerate(rows):
            if len(row) != 3:
                raise ContractError(f"triple {i}: expected (user, item, domain)")
        model = self.model_
        graph = model.graph
        with no_grad():
            en = model.propagate().data
        out = np.zeros(len(rows), dtype=np.float64)
        for d in ("S", "T"):
            sel = [i for i, r in enumerate(rows) if r[2] == d]
            bad = [i for i, r in enumerate(rows) if r[2] not in ("S", "T")]
            if bad:
                raise ContractError(f"triple {bad[0]}: unknown domain {rows[bad[0]][2]!r}")
            if not sel:
                continue
            try:
                users = np.array([self.user_index_[str(rows[i][0])] for i in sel])
                items = np.array([self.item_index_[d][str(rows[i][1])] for i in sel])
            except KeyError as exc:
                raise ContractError(f"unknown id {exc.args[0]!r}") from None
            u_rows = graph.user_side_node(d, users)
            a, b, merged = graph.repr_rows(users)
            u_in = en[u_rows]
            if np.any(merged):
                u_in = u_in.copy()
                u_in[merged] = np.maximum(en[a[merged]], en[b[merged]])
            u_name, v_name = tower_names(d)
            with no_grad():
                yhat = pair_predict(
                    model.params,
                    d,
                    Tensor(u_in),
                    Tensor(en[graph.item_node(d, items)]),
                )
            out[sel] = yhat.data.reshape(-1).astype(np.float64)
        return out

    def evaluate(self) -> dict:
        check_is_fitted(self, "model_")
        return evaluate(self.model_).to_json_obj()

    def score(self, X=None, y=None) -> float:
        """Mean top-10 hit rate across domains on the held-out split."""
        check_is_fitted(self, "model_")
        report = evaluate(self.model_)
        vals = [
            report.hit(d, 10)
            for d in ("S", "T")
            if report.domains[d]["n_test"] > 0
        ]
        if not vals:
            raise ContractError("no test cases available to score")
        return float(np.mean(vals))
