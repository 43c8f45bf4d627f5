"""Constrained adaptive projection engine for one-class anomaly detection.

A memory bank of pretrained normal features answers top-K cosine
queries; a learned projection head plus reformed self-attention build a
per-query normal representation; the anomaly score is one minus the
cosine between the adapted query and that representation. A weighted
constraint term keeps the adapted space anchored to the pretrained one,
preventing pattern collapse.
"""

from .bank import (
    MemoryBank,
    NeighborSet,
    build_bank,
    cosine_similarities,
    load_bank,
    load_labeled_features,
    save_bank,
    save_labeled_features,
    top_k_neighbors,
)
from .errors import CapError, ConfigError, DataError, FormatError, NumericalError
from .heatmap import (
    HeatmapResult,
    SpatialFeatureMap,
    anomaly_heatmap,
    bilinear_upsample,
    load_spatial_maps,
    save_spatial_maps,
    similarity_map,
)
from .model import (
    AttentionParams,
    ForwardOutput,
    HeadParams,
    ModelParams,
    forward,
    init_model,
    load_model,
    normal_representation,
    project,
    reformed_attention,
    save_model,
)
from .objective import (
    GradientSet,
    LossBreakdown,
    batch_gradients,
    constraint_term,
    finite_difference_oracle,
    gradients,
    similarity_loss,
    total_loss,
)
from .scoring import (
    ScoreReport,
    anomaly_score,
    auroc,
    baseline_score_no_adaptation,
    batch_baseline_scores,
    batch_scores,
    evaluate,
)
from .synthetic import (
    SyntheticInstance,
    gaussian_cluster_instance,
    knn_oracle,
    pairwise_auroc_oracle,
    standard_instance,
)
from .trainer import (
    NeighborTable,
    OptimizerState,
    TrainingConfig,
    TrainingTrace,
    adam_step,
    collapse_diagnostics,
    precompute_neighbors,
    preset,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionParams",
    "CapError",
    "ConfigError",
    "DataError",
    "FormatError",
    "ForwardOutput",
    "GradientSet",
    "HeadParams",
    "HeatmapResult",
    "LossBreakdown",
    "MemoryBank",
    "ModelParams",
    "NeighborSet",
    "NeighborTable",
    "NumericalError",
    "OptimizerState",
    "ScoreReport",
    "SpatialFeatureMap",
    "SyntheticInstance",
    "TrainingConfig",
    "TrainingTrace",
    "adam_step",
    "anomaly_heatmap",
    "anomaly_score",
    "auroc",
    "baseline_score_no_adaptation",
    "batch_baseline_scores",
    "batch_gradients",
    "batch_scores",
    "bilinear_upsample",
    "build_bank",
    "collapse_diagnostics",
    "constraint_term",
    "cosine_similarities",
    "evaluate",
    "finite_difference_oracle",
    "forward",
    "gaussian_cluster_instance",
    "gradients",
    "init_model",
    "knn_oracle",
    "load_bank",
    "load_labeled_features",
    "load_model",
    "load_spatial_maps",
    "normal_representation",
    "pairwise_auroc_oracle",
    "precompute_neighbors",
    "preset",
    "project",
    "reformed_attention",
    "save_bank",
    "save_labeled_features",
    "save_model",
    "save_spatial_maps",
    "similarity_loss",
    "similarity_map",
    "standard_instance",
    "top_k_neighbors",
    "total_loss",
    "train",
]
