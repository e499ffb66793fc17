"""Torso-segmentation pipeline toolkit: volume I/O, stitching, pseudo-CT,
label schemas, post-processing, quadrant localizers, vertebra instancing,
tiled inference fusion, and evaluation metrics."""

__version__ = "0.1.0"

from .errors import GridMismatchError, IOFailure, TorsosegError, ValidationError
from .metrics import BootstrapCI, ClassMetrics, assd, bootstrap_ci, dice, macro_dice, per_class_report
from .nifti import read_volume, write_volume
from .postproc import ComponentStats, connected_components, filter_small_components, merge_with_priority
from .pseudoct import find_background_and_lung, make_pseudo_ct
from .quadrants import body_mask, compute_quadrants, quadrant_labelmap, to_iso4
from .schema import (
    ClassDef,
    InstanceClassDef,
    LabelSchema,
    MappingReport,
    builtin_schema,
    ct_reference_schema,
    laterality_check,
    map_total_ct,
    validate_labels,
)
from .stitch import stitch
from .tiler import (
    FusionConfig,
    FusionStats,
    PatchOracle,
    SubprocessOracle,
    TilePlan,
    fuse,
    fuse_scored,
    mock_oracle,
    plan_tiles,
)
from .vertebrae import SpineReport, detect_anomalies, instance_label
from .volume import GridSpec, Volume, elastic_deform, reorient, resample

__all__ = [
    "__version__",
    "TorsosegError", "ValidationError", "GridMismatchError", "IOFailure",
    "Volume", "GridSpec", "reorient", "resample", "elastic_deform",
    "read_volume", "write_volume",
    "LabelSchema", "ClassDef", "InstanceClassDef", "MappingReport",
    "builtin_schema", "ct_reference_schema", "map_total_ct",
    "validate_labels", "laterality_check",
    "stitch",
    "find_background_and_lung", "make_pseudo_ct",
    "ComponentStats", "connected_components", "filter_small_components",
    "merge_with_priority",
    "to_iso4", "body_mask", "compute_quadrants", "quadrant_labelmap",
    "SpineReport", "instance_label", "detect_anomalies",
    "ClassMetrics", "BootstrapCI", "dice", "assd", "per_class_report",
    "macro_dice", "bootstrap_ci",
    "TilePlan", "PatchOracle", "FusionConfig", "FusionStats",
    "plan_tiles", "fuse", "fuse_scored", "mock_oracle", "SubprocessOracle",
]
