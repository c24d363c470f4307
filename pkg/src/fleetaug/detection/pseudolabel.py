"""Confidence filtering of client detections and hybrid pseudo labels."""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

from fleetaug.augment.gtbank import Placement
from fleetaug.geometry.boxes import Box3D, Detection
from fleetaug.geometry.iou import iou_bev

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SslThresholds:
    """Minimum localization (IoU) and class confidence for a kept pseudo label."""

    tau_iou: float = 0.5
    tau_cls: float = 0.4

    def __post_init__(self):
        for name in ("tau_iou", "tau_cls"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


class LabelOrigin(Enum):
    PSEUDO = "pseudo"
    GT = "gt"


@dataclass(frozen=True)
class HybridLabel:
    box: Box3D
    origin: LabelOrigin


@dataclass(frozen=True)
class HybridLabelSet:
    """Filtered pseudo labels united with placed GT labels."""

    labels: Tuple[HybridLabel, ...]

    def boxes(self) -> List[Box3D]:
        return [label.box for label in self.labels]

    def count(self, origin: LabelOrigin) -> int:
        return sum(1 for label in self.labels if label.origin is origin)

    def __len__(self) -> int:
        return len(self.labels)


def filter_detections(dets: Sequence[Detection], th: SslThresholds) -> List[Box3D]:
    """Keep boxes whose class and IoU confidences both reach their thresholds."""
    return [d.box for d in dets if d.cls_conf >= th.tau_cls and d.iou_conf >= th.tau_iou]


def max_cross_overlap(hybrid: HybridLabelSet) -> float:
    """Largest BEV IoU between a gt-origin and a pseudo-origin label (0 if none)."""
    gts = [l.box for l in hybrid.labels if l.origin is LabelOrigin.GT]
    pseudo = [l.box for l in hybrid.labels if l.origin is LabelOrigin.PSEUDO]
    return max((iou_bev(g, p) for g in gts for p in pseudo), default=0.0)


def make_hybrid(pseudo: Sequence[Box3D], placed_gt: Sequence[Placement]) -> HybridLabelSet:
    """
    Tag pseudo boxes and placed GT boxes and put them in one label set.

    Raises:
        ValueError: If a placed GT box overlaps a pseudo box
    """
    gt_boxes = [placement.box for placement in placed_gt]
    for i, gt_box in enumerate(gt_boxes):
        for j, pseudo_box in enumerate(pseudo):
            overlap = iou_bev(gt_box, pseudo_box)
            if overlap > 0.0:
                raise ValueError(
                    f"placed GT {i} overlaps pseudo label {j} (BEV IoU {overlap:.4f})"
                )
    labels = tuple(HybridLabel(box, LabelOrigin.PSEUDO) for box in pseudo) + tuple(
        HybridLabel(box, LabelOrigin.GT) for box in gt_boxes
    )
    logger.debug("hybrid labels: %d pseudo, %d gt", len(pseudo), len(gt_boxes))
    return HybridLabelSet(labels)
