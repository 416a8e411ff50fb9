from __future__ import annotations

from nide._analysis import (
    Decomposition,
    DecompositionScores,
    Embedding,
    Projection,
    compare_decompositions,
    count_self_intersections,
    decompose,
    decompose_system,
    embed,
    knn_classify,
    knn_regress,
    pca_project,
)
from nide._autodiff import Tape, Tensor, backward, grad_check, no_record, record
from nide._datasets import GeneratedDataset, GeneratorSystem, default_systems, gen
from nide._exceptions import (
    CheckpointError,
    DimensionError,
    GenerationError,
    InvalidConfigError,
    InvalidTrajectoryError,
    NIDEException,
    NonFiniteError,
    ShapeError,
    SolverError,
    TapeError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from nide._gradients import (
    AdjointState,
    GradientComparison,
    KernelScaleRow,
    adjoint_pass,
    compare_gradients,
    compute_gradient,
    grad_adjoint,
    grad_fd,
    grad_unrolled,
    kernel_scale_sweep,
    smoke_suite,
)
from nide._io import (
    load_checkpoint,
    load_config,
    load_csv,
    load_dataset,
    load_decomposition,
    load_masks,
    load_metrics,
    load_truth,
    save_checkpoint,
    save_config,
    save_csv,
    save_decomposition,
    save_embedding,
    save_history,
    save_masks,
    save_metrics,
    write_dataset,
)
from nide._models import (
    AdamConfig,
    Checkpoint,
    Dataset,
    Fredholm,
    GeneratorSpec,
    GradcheckConfig,
    GradMode,
    LossSpec,
    MaskPolicy,
    Metrics,
    MlpSpec,
    ModelConfig,
    ParamVector,
    QuadratureRule,
    RunConfig,
    ScheduleConfig,
    SolverConfig,
    TimeNormalization,
    TrainConfig,
    Trajectory,
    Volterra,
)
from nide._nets import DynamicsNet, IntegrandNet, KernelNet, Mlp
from nide._numerics import GridFunction, integrate, nodes_and_weights
from nide._optim import Adam, CosineAnnealing
from nide._solver import IdeSystem, Solution, integral_term, local_term, residual, solve_ivp
from nide._training import (
    EpochRecord,
    ModelSummary,
    Prediction,
    TrainResult,
    compare_models,
    evaluate,
    extrapolate,
    make_node_baseline,
    predict,
    predict_from_ic,
    train,
)
from nide._version import __version__, __version_tuple__

__all__ = (
    # autodiff
    "Tensor",
    "Tape",
    "record",
    "no_record",
    "backward",
    "grad_check",
    # numerics
    "nodes_and_weights",
    "integrate",
    "GridFunction",
    # nets
    "Mlp",
    "DynamicsNet",
    "KernelNet",
    "IntegrandNet",
    # solver
    "IdeSystem",
    "Solution",
    "solve_ivp",
    "local_term",
    "integral_term",
    "residual",
    # gradients
    "grad_unrolled",
    "grad_adjoint",
    "adjoint_pass",
    "grad_fd",
    "compute_gradient",
    "compare_gradients",
    "kernel_scale_sweep",
    "smoke_suite",
    "GradientComparison",
    "KernelScaleRow",
    "AdjointState",
    # optimization and training
    "Adam",
    "CosineAnnealing",
    "train",
    "predict",
    "predict_from_ic",
    "extrapolate",
    "evaluate",
    "make_node_baseline",
    "compare_models",
    "TrainResult",
    "EpochRecord",
    "Prediction",
    "ModelSummary",
    # analysis
    "Decomposition",
    "DecompositionScores",
    "decompose",
    "decompose_system",
    "compare_decompositions",
    "Embedding",
    "embed",
    "knn_regress",
    "knn_classify",
    "Projection",
    "pca_project",
    "count_self_intersections",
    # datasets
    "GeneratorSystem",
    "GeneratedDataset",
    "default_systems",
    "gen",
    # files
    "save_csv",
    "load_csv",
    "write_dataset",
    "load_dataset",
    "load_truth",
    "save_config",
    "load_config",
    "save_checkpoint",
    "load_checkpoint",
    "save_decomposition",
    "load_decomposition",
    "save_embedding",
    "save_history",
    "save_metrics",
    "load_metrics",
    "save_masks",
    "load_masks",
    # models
    "Trajectory",
    "Dataset",
    "MlpSpec",
    "ParamVector",
    "QuadratureRule",
    "Volterra",
    "Fredholm",
    "SolverConfig",
    "LossSpec",
    "GradMode",
    "ModelConfig",
    "AdamConfig",
    "ScheduleConfig",
    "TrainConfig",
    "MaskPolicy",
    "TimeNormalization",
    "Checkpoint",
    "Metrics",
    "GeneratorSpec",
    "GradcheckConfig",
    "RunConfig",
    # exceptions
    "NIDEException",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "DimensionError",
    "SolverError",
    "InvalidTrajectoryError",
    "InvalidConfigError",
    "CheckpointError",
    "GenerationError",
    "TrainingDivergedError",
    "UndefinedMetricError",
    "__version__",
    "__version_tuple__",
)
