"""Weakly supervised instrument localization: bootstrap, filter and iterate pseudo-labels."""

from .bootstrap import BootstrapConfig, anchor_boxes, bootstrap_corpus, bootstrap_frame
from .errors import (
    IntegrityError,
    PipelineStateError,
    RegistryError,
    SchemaError,
    StalenessError,
    TrainingError,
    ValidationError,
    WslocError,
)
from .eval import average_precision, label_quality, map_range
from .filter import FilterConfig, filter_corpus, filter_frame, match_count
from .geometry import Box2D, intersection_over_min, iou, ordering_key
from .model import (
    SPECIAL_LIST,
    ClassRegistry,
    ClipCaption,
    FrameDetections,
    PartKind,
    PseudoLabelRecord,
    ToolClass,
    build_class_registry,
)
from .rounds import RoundPlan, run_plan, run_round

__version__ = "0.1.0"
