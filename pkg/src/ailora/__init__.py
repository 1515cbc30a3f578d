"""Function-aware asymmetric low-rank adapter initialization toolkit.

SVD-based weight splitting, four adapter initialization schemes (standard
LoRA, principal split, minor split, and the asymmetric principal-on-q /
minor-on-v assignment), a desk-scale transformer trainer with hand-written
gradients, and training diagnostics.
"""

__version__ = "0.1.0"

from .adapters import (
    AdaptedLinear,
    AdapterConfig,
    AdapterScheme,
    adapted_forward,
    adapter_store,
    format_ranks,
    init_adapters,
    load_adapters,
    merge,
    parse_ranks,
    trainable_parameter_count,
)
from .analysis import (
    ForgettingReport,
    SimilarityReport,
    delta_norms,
    forgetting_loss,
    similarity_report,
    subspace_similarity,
)
from .errors import (
    ConfigError,
    DivergenceError,
    NumericError,
    ShapeError,
    StoreFormatError,
)
from .factorization import (
    LowRankSplit,
    SplitKind,
    reconstruct,
    split,
    split_minor,
    split_principal,
)
from .model import (
    ModelConfig,
    ToyModel,
    attach_adapters,
    backward,
    build_model,
    forward,
    model_from_store,
    model_to_store,
    predict_proba,
    softmax_xent,
)
from .store import TensorStore
from .svd import SvdResult, svd
from .tasks import SynthTask, TaskKind
from .tensor import Matrix, as_matrix, frobenius_norm, matmul
from .training import (
    TrainConfig,
    adamw_step,
    apply_finetune,
    evaluate,
    finetune,
    finetune_store,
    pretrain,
    train,
    write_curves,
)

__all__ = [
    "AdaptedLinear",
    "AdapterConfig",
    "AdapterScheme",
    "ConfigError",
    "DivergenceError",
    "ForgettingReport",
    "LowRankSplit",
    "Matrix",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "SimilarityReport",
    "SplitKind",
    "StoreFormatError",
    "SvdResult",
    "SynthTask",
    "TaskKind",
    "TensorStore",
    "ToyModel",
    "TrainConfig",
    "adamw_step",
    "adapted_forward",
    "adapter_store",
    "apply_finetune",
    "as_matrix",
    "attach_adapters",
    "backward",
    "build_model",
    "delta_norms",
    "evaluate",
    "finetune",
    "finetune_store",
    "forgetting_loss",
    "format_ranks",
    "forward",
    "frobenius_norm",
    "init_adapters",
    "load_adapters",
    "matmul",
    "merge",
    "model_from_store",
    "model_to_store",
    "parse_ranks",
    "predict_proba",
    "pretrain",
    "reconstruct",
    "similarity_report",
    "softmax_xent",
    "split",
    "split_minor",
    "split_principal",
    "subspace_similarity",
    "svd",
    "trainable_parameter_count",
    "train",
    "write_curves",
]
