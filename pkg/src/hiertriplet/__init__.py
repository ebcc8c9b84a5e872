"""Hierarchy-aware contrastive representation learning.

Trains a small embedding head over frozen features by walking a concept
tree level by level, with a margin schedule that shrinks as concepts get
finer and optional replay of earlier levels. Evaluation is a frozen-encoder
linear probe (mAP / pooled mAP*) plus a PCA+t-SNE projection.
"""

from .contrastive import (
    LevelUnsampleable,
    MarginSchedule,
    NonFiniteLossError,
    ReplayScheduler,
    TrainConfig,
    TrainResult,
    Triplet,
    TripletRetryExhausted,
    batch_triplet_loss,
    draw_batch_level,
    eligible_anchor_nodes,
    margin,
    sample_batch,
    sample_triplet,
    train,
    triplet_loss,
    write_training_log,
)
from .hierarchy import (
    ConceptNode,
    ConceptTree,
    Dataset,
    ImageRecord,
    feature_matrix,
    ManifestError,
    build_pools,
    build_tree,
    image_concept_labels,
    load_dataset,
    load_manifest,
    nodes_at_level,
    owned_only_pools,
    pretraining_pools,
    read_features_bin,
    read_features_csv,
    save_dataset,
    write_features_bin,
    write_features_csv,
    write_manifest,
)
from .numerics import (
    AdamState,
    EncoderConfig,
    EncoderModel,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)
from .probe import (
    LinearProbe,
    ProbeConfig,
    ProbeReport,
    average_precision,
    binary_average_precision,
    evaluate_probe,
    pooled_ranking_ap,
    train_probe,
    write_report,
)
from .synth import PRESETS, SynthSpec, generate, preset
from .viz import (
    ProjectionConfig,
    export_projection,
    pca,
    project,
    read_projection_csv,
    tsne,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ConceptNode",
    "ConceptTree",
    "Dataset",
    "EncoderConfig",
    "EncoderModel",
    "ImageRecord",
    "LevelUnsampleable",
    "LinearProbe",
    "ManifestError",
    "MarginSchedule",
    "NonFiniteLossError",
    "PRESETS",
    "ProbeConfig",
    "ProbeReport",
    "ProjectionConfig",
    "ReplayScheduler",
    "SynthSpec",
    "TrainConfig",
    "TrainResult",
    "Triplet",
    "TripletRetryExhausted",
    "adam_step",
    "average_precision",
    "batch_triplet_loss",
    "binary_average_precision",
    "build_pools",
    "build_tree",
    "draw_batch_level",
    "eligible_anchor_nodes",
    "evaluate_probe",
    "feature_matrix",
    "export_projection",
    "generate",
    "image_concept_labels",
    "load_checkpoint",
    "load_dataset",
    "load_manifest",
    "margin",
    "nodes_at_level",
    "owned_only_pools",
    "pca",
    "pooled_ranking_ap",
    "preset",
    "pretraining_pools",
    "project",
    "read_features_bin",
    "read_features_csv",
    "read_projection_csv",
    "save_dataset",
    "sample_batch",
    "sample_triplet",
    "save_checkpoint",
    "train",
    "train_probe",
    "write_report",
    "triplet_loss",
    "tsne",
    "write_features_bin",
    "write_features_csv",
    "write_manifest",
    "write_training_log",
]
