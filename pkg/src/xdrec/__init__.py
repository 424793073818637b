"""Cross-domain recommendation with a unified interaction graph.

Public surface: the tensor/autodiff core, data handling, graph assembly,
model components, the training engine, and a scikit-learn style wrapper.
"""

from .tensor import (
    ContractError,
    CsrMatrix,
    DimensionError,
    NumericDomainError,
    ParamSet,
    Tape,
    Tensor,
    backward,
    load_checkpoint,
    no_grad,
    save_checkpoint,
    spmm,
)
from .dataio import (
    DataFormatError,
    Dataset,
    Interaction,
    SplitPlan,
    SynthConfig,
    build_dataset,
    load_dataset,
    prepare_dataset,
    sample_training_batch,
    seed_stream,
    split_from_json,
    split_leave_one_out,
    synth_dataset,
    synth_generate,
    write_dataset,
)
from .xgraph import CrossDomainGraph, build_graph, merge_user_embedding, two_hop_neighbors
from .engine import (
    Adam,
    DivergenceError,
    EvalReport,
    ModelState,
    TrainConfig,
    evaluate,
    load_model,
    popularity_baseline,
    random_baseline,
    run_ablation,
    run_overlap,
    run_sweep,
    save_model,
    train,
)
from .estimator import CrossDomainRecommender

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ContractError",
    "CrossDomainGraph",
    "CrossDomainRecommender",
    "CsrMatrix",
    "DataFormatError",
    "Dataset",
    "DimensionError",
    "DivergenceError",
    "EvalReport",
    "Interaction",
    "ModelState",
    "NumericDomainError",
    "ParamSet",
    "SplitPlan",
    "SynthConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_dataset",
    "build_graph",
    "evaluate",
    "load_checkpoint",
    "load_dataset",
    "load_model",
    "merge_user_embedding",
    "no_grad",
    "popularity_baseline",
    "prepare_dataset",
    "random_baseline",
    "run_ablation",
    "run_overlap",
    "run_sweep",
    "sample_training_batch",
    "save_checkpoint",
    "save_model",
    "seed_stream",
    "split_from_json",
    "split_leave_one_out",
    "spmm",
    "synth_dataset",
    "synth_generate",
    "train",
    "two_hop_neighbors",
    "write_dataset",
    "__version__",
]
