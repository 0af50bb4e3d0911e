"""Layer-wise checkpoint merging with surrogate-guided configuration search."""

from .checkpoint import (
    ArchitectureSchema,
    CheckpointFormatError,
    DuplicateTensorError,
    IncompatibleModelsError,
    LayerGroup,
    ModelParams,
    TensorRecord,
    TruncatedCheckpointError,
    UnsupportedDtypeError,
    load_checkpoint,
    partition_layers,
    save_checkpoint,
    validate_compatible,
)
from .config_space import MergeConfig, SearchSpace, encode, mutate, sample_config
from .evaluators import (
    EvaluatorError,
    ExternalEvaluatorSpec,
    ExternalProblem,
    make_synthetic_problem,
    make_toy_segmentation_problem,
)
from .kernels import (
    METHODS,
    ConfigError,
    GroupMergeSpec,
    apply_config,
    merge_linear,
    merge_models,
    merge_slerp,
    merge_task_arithmetic,
    merge_ties,
    task_vector,
)
from .objectives import dice, parego_scalarize, pareto_front, sample_simplex_weights, select_final
from .optimizer import SearchResult, expected_improvement, propose_next, run_search
from .presets import get_schema, sam_vit_b_schema

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSchema",
    "CheckpointFormatError",
    "ConfigError",
    "DuplicateTensorError",
    "EvaluatorError",
    "ExternalEvaluatorSpec",
    "ExternalProblem",
    "GroupMergeSpec",
    "IncompatibleModelsError",
    "LayerGroup",
    "METHODS",
    "MergeConfig",
    "ModelParams",
    "SearchResult",
    "SearchSpace",
    "TensorRecord",
    "TruncatedCheckpointError",
    "UnsupportedDtypeError",
    "apply_config",
    "dice",
    "encode",
    "expected_improvement",
    "get_schema",
    "load_checkpoint",
    "make_synthetic_problem",
    "make_toy_segmentation_problem",
    "merge_linear",
    "merge_models",
    "merge_slerp",
    "merge_task_arithmetic",
    "merge_ties",
    "mutate",
    "parego_scalarize",
    "pareto_front",
    "partition_layers",
    "propose_next",
    "run_search",
    "sam_vit_b_schema",
    "sample_config",
    "sample_simplex_weights",
    "save_checkpoint",
    "select_final",
    "task_vector",
    "validate_compatible",
]
