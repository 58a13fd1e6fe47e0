"""Synthetic pelvic-fracture segmentation toolkit.

Covers the non-neural parts of a category-and-fragment segmentation
workflow: phantom volume generation, parallel-beam DRR projection with
per-fragment ground-truth masks, zero-padding, candidate post-processing
(confidence filter, mask NMS, category intersection, canonical order),
IoU/ASSD/HD95 evaluation, and overlap-ratio analysis.  Neural predictors
plug in through an on-disk exchange format; a deterministic mock
predictor stands in for them end to end.
"""

from .errors import CfsError, FileFormatError, ValidationError
from .mask_model import (
    CategoryId,
    FragmentMaskSet,
    Radiograph,
    decode,
    encode,
    read_mask_file,
    read_pgm,
    write_mask_file,
    write_pgm,
)
from .preprocess import PadRecord, crop, zero_pad
from .synth_phantom import (
    FracturePlane,
    LabelVolume,
    PhantomSpec,
    fracture,
    generate,
    read_volume,
    write_volume,
)
from .drr_projector import (
    ProjectionGeometry,
    make_views,
    overlap_ratio,
    project,
    traverse,
)
from .predictor_iface import (
    CategoryPrediction,
    ExternalPredictor,
    FragmentCandidate,
    MockConfig,
    MockPredictor,
    load_external_predictions,
    mock_predict_category,
    mock_predict_fragments,
    tight_bbox,
    write_predictions,
)
from .pipeline import (
    PipelineConfig,
    binarize_category,
    canonical_reorder,
    filter_by_confidence,
    intersect_with_category,
    mask_nms,
    postprocess_category,
    run_cfs,
)
from .metrics import (
    AggregateStats,
    MatchResult,
    MetricsRecord,
    aggregate,
    assd,
    boundary,
    edt,
    edt_squared,
    evaluate_image,
    hd95,
    iou,
    match_fragments,
)
from .overlap_analysis import OverlapRow, analyze, emit_report, read_report, spearman

__version__ = "0.1.0"

__all__ = [
    "AggregateStats",
    "CategoryId",
    "CategoryPrediction",
    "CfsError",
    "ExternalPredictor",
    "FileFormatError",
    "FracturePlane",
    "FragmentCandidate",
    "FragmentMaskSet",
    "LabelVolume",
    "MatchResult",
    "MetricsRecord",
    "MockConfig",
    "MockPredictor",
    "OverlapRow",
    "PadRecord",
    "PhantomSpec",
    "PipelineConfig",
    "ProjectionGeometry",
    "Radiograph",
    "ValidationError",
    "aggregate",
    "analyze",
    "assd",
    "binarize_category",
    "boundary",
    "canonical_reorder",
    "crop",
    "decode",
    "edt",
    "edt_squared",
    "emit_report",
    "encode",
    "evaluate_image",
    "filter_by_confidence",
    "fracture",
    "generate",
    "hd95",
    "intersect_with_category",
    "iou",
    "load_external_predictions",
    "make_views",
    "mask_nms",
    "match_fragments",
    "mock_predict_category",
    "mock_predict_fragments",
    "overlap_ratio",
    "postprocess_category",
    "project",
    "read_mask_file",
    "read_pgm",
    "read_report",
    "read_volume",
    "run_cfs",
    "spearman",
    "tight_bbox",
    "traverse",
    "write_mask_file",
    "write_pgm",
    "write_predictions",
    "write_volume",
    "zero_pad",
]
