"""Cascaded hourglass pose estimation with cross-stage feature aggregation.

The package is organized as a library: heatmap encoding and fusion, a
configurable-scale hourglass backbone, the multi-stage cascade, PCKh
evaluation, a deterministic synthetic dataset, and the training loops.
The ``cfa-pose`` command ties these together into a pipeline.
"""

from .backbone import BackboneConfig, HourglassBackbone, ShapeError, StageFeatures
from .cascade import (
    CascadeConfig,
    CascadeOutput,
    CascadePose,
    StageAggregator,
    combine_stage_heatmaps,
    grow_cascade,
)
from .checkpoint import config_hash, file_hash, load_checkpoint, read_manifest, save_checkpoint
from .heatmaps import (
    HeatmapGeometry,
    decode_heatmaps,
    encode_heatmaps,
    flip_average,
    fuse_heatmaps,
    load_heatmap_dump,
    save_heatmap_dump,
)
from .metrics import PCKhReport, format_report_table, pckh, reports_to_json
from .schema import (
    AnnotationError,
    PersonAnnotation,
    PoseSample,
    PredictionRecord,
    SkeletonSpec,
    load_annotations,
    load_predictions,
    mpii_skeleton,
    save_annotations,
    save_predictions,
    validate_annotation,
)
from .synth import (
    AugmentParams,
    AugmentRanges,
    SynthConfig,
    augment,
    generate_dataset,
    generate_sample,
    load_dataset,
    sample_augment_params,
    write_dataset,
)
from .training import (
    EvalConfig,
    EvalResult,
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    evaluate,
    fused_from_stage_maps,
    heatmap_loss,
    lr_for_epoch,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationError",
    "AugmentParams",
    "AugmentRanges",
    "BackboneConfig",
    "CascadeConfig",
    "CascadeOutput",
    "CascadePose",
    "EvalConfig",
    "EvalResult",
    "HeatmapGeometry",
    "HourglassBackbone",
    "PCKhReport",
    "PersonAnnotation",
    "PoseSample",
    "PredictionRecord",
    "ShapeError",
    "SkeletonSpec",
    "StageAggregator",
    "StageFeatures",
    "SynthConfig",
    "TrainConfig",
    "TrainLog",
    "TrainingDiverged",
    "augment",
    "combine_stage_heatmaps",
    "config_hash",
    "decode_heatmaps",
    "encode_heatmaps",
    "evaluate",
    "file_hash",
    "flip_average",
    "format_report_table",
    "fuse_heatmaps",
    "fused_from_stage_maps",
    "generate_dataset",
    "generate_sample",
    "grow_cascade",
    "heatmap_loss",
    "load_annotations",
    "load_checkpoint",
    "load_dataset",
    "load_heatmap_dump",
    "load_predictions",
    "lr_for_epoch",
    "mpii_skeleton",
    "pckh",
    "read_manifest",
    "reports_to_json",
    "sample_augment_params",
    "save_annotations",
    "save_checkpoint",
    "save_heatmap_dump",
    "save_predictions",
    "train",
    "validate_annotation",
    "write_dataset",
]
