"""Toolkit for detecting hands in contact with objects.

Detects every hand in an image with side, contact state, and the box of the
contacted object; links hands to objects; scores the reliability of 3D
hand-mesh reconstructions; and mines contact-onset events into a grasp
codebook. Ships a VOC-style metric suite with compound true-positive criteria.
"""

__version__ = "0.1.0"

from .data_model import (  # noqa: F401
    BBox,
    ContactState,
    DatasetStats,
    HandAnnotation,
    HandSide,
    ImageRecord,
    compute_stats,
    load_annotations,
    median_box,
    save_annotations,
    split_by_uploader,
)
from .errors import (  # noqa: F401
    AnnotationFormatError,
    DataError,
    EventExcluded,
    HandContactError,
    ReconstructionError,
    TrainingError,
)
from .association import (  # noqa: F401
    ImageParse,
    ParsedHand,
    encode_offset,
    load_parses,
    parse,
    parse_from_record,
    predict_target_point,
    save_parses,
)
from .detector.types import HandDetection, ObjectDetection  # noqa: F401
from .evaluation import (  # noqa: F401
    ALL_CRITERIA,
    EvalCriterion,
    PRCurve,
    average_precision,
    evaluate_state,
    format_report,
    iou,
    scale_binned_ap,
)
from .mesh_quality import (  # noqa: F401
    DEFAULT_ANGLES,
    CentroidReconstructor,
    MeshRecord,
    QualityLabel,
    ScoredRecord,
    auroc,
    baseline_gaussian,
    baseline_nb,
    consistency_score,
    make_labels,
    train_quality_mlp,
)
from .grasp_mining import (  # noqa: F401
    Codebook,
    ContactEvent,
    Track,
    assign_code,
    build_codebook,
    build_tracks,
    extract_pair,
    filter_events,
    find_contact_events,
    load_codebook,
    save_codebook,
    train_grasp_classifier,
)
from .rendering import render_parse, render_pr_curves  # noqa: F401
