"""Detection head, pseudo-label filtering and AP evaluation."""

from fleetaug.detection.evaluation import (
    EvalConfig,
    MatchResult,
    Metric,
    average_precision,
    evaluate_dataset,
    match_detections,
    precision_recall,
)
from fleetaug.detection.head import (
    AnchorGrid,
    HeadGradients,
    HeadParams,
    LossBreakdown,
    Predictions,
    Targets,
    apply_update,
    assign_targets,
    batch_gradients,
    compute_loss,
    decode_boxes,
    decode_predictions,
    encode_boxes,
    head_forward,
    init_head,
    loss_and_gradients,
    total_loss,
    train_step,
)
from fleetaug.detection.pseudolabel import (
    HybridLabel,
    HybridLabelSet,
    LabelOrigin,
    SslThresholds,
    filter_detections,
    make_hybrid,
    max_cross_overlap,
)

__all__ = [
    "AnchorGrid",
    "EvalConfig",
    "HeadGradients",
    "HeadParams",
    "HybridLabel",
    "HybridLabelSet",
    "LabelOrigin",
    "LossBreakdown",
    "MatchResult",
    "Metric",
    "Predictions",
    "SslThresholds",
    "Targets",
    "apply_update",
    "assign_targets",
    "average_precision",
    "batch_gradients",
    "compute_loss",
    "decode_boxes",
    "decode_predictions",
    "encode_boxes",
    "evaluate_dataset",
    "filter_detections",
    "head_forward",
    "init_head",
    "loss_and_gradients",
    "make_hybrid",
    "match_detections",
    "max_cross_overlap",
    "precision_recall",
    "total_loss",
    "train_step",
]
