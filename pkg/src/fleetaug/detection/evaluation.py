"""Greedy detection matching and interpolated average precision."""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from fleetaug.geometry.boxes import Box3D, Detection, boxes_array
from fleetaug.geometry.iou import iou_3d_matrix, iou_bev_matrix

logger = logging.getLogger(__name__)

_RECALL_EPS = 1e-12


class Metric(Enum):
    BEV = "bev"
    IOU_3D = "3d"

    @classmethod
    def parse(cls, name: str) -> "Metric":
        key = name.strip().lower()
        for metric in cls:
            if metric.value == key:
                return metric
        raise ValueError(f"unknown metric {name!r}; expected 'bev' or '3d'")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    metric: Metric = Metric.BEV
    ap_points: int = 40

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.ap_points < 2:
            raise ValueError(f"ap_points must be >= 2, got {self.ap_points}")


@dataclass(frozen=True)
class MatchResult:
    """Detections in descending-score order with their TP flags."""

    scores: np.ndarray
    tp: np.ndarray
    gt_matched: np.ndarray

    @property
    def num_gts(self) -> int:
        return int(self.gt_matched.shape[0])


def _overlaps(dets: Sequence[Detection], gts: Sequence[Box3D], metric: Metric) -> np.ndarray:
    det_boxes = boxes_array([d.box for d in dets])
    gt_boxes = boxes_array(gts)
    if metric is Metric.BEV:
        return iou_bev_matrix(det_boxes, gt_boxes)
    return iou_3d_matrix(det_boxes, gt_boxes)


def match_detections(dets: Sequence[Detection], gts: Sequence[Box3D], cfg: EvalConfig) -> MatchResult:
    """
    Greedily match detections to ground truth.

    Detections are visited by descending cls_conf (input order breaks ties);
    each takes the highest-IoU unmatched GT at or above the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].cls_conf)
    scores = np.array([dets[i].cls_conf for i in order], dtype=np.float64)
    tp = np.zeros(len(order), dtype=bool)
    gt_matched = np.zeros(len(gts), dtype=bool)
    if not order or not gts:
        return MatchResult(scores, tp, gt_matched)

    overlaps = _overlaps([dets[i] for i in order], gts, cfg.metric)
    for rank in range(len(order)):
        candidates = np.where(gt_matched, -1.0, overlaps[rank])
        best = int(np.argmax(candidates))
        if candidates[best] >= cfg.iou_threshold:
            tp[rank] = True
            gt_matched[best] = True
    return MatchResult(scores, tp, gt_matched)


def precision_recall(flags: Sequence[bool], num_gts: int) -> Tuple[np.ndarray, np.ndarray]:
    """Precision and recall after each ranked detection."""
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, tp.size + 1, dtype=np.float64)
    precision = tp / ranks if tp.size else tp
    recall = tp / num_gts if num_gts > 0 else np.zeros_like(tp)
    return precision, recall


def average_precision(flags: Sequence[bool], num_gts: int, cfg: EvalConfig) -> float:
    """
    Interpolated AP sampled at recall i/ap_points for i = 1..ap_points.

    With no GT the AP is 1 when there are no detections and 0 otherwise.
    """
    if num_gts < 0:
        raise ValueError(f"num_gts must be >= 0, got {num_gts}")
    flags = np.asarray(flags, dtype=bool)
    if num_gts == 0:
        return 1.0 if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0

    precision, recall = precision_recall(flags, num_gts)
    # max precision to the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for i in range(1, cfg.ap_points + 1):
        reached = np.flatnonzero(recall >= i / cfg.ap_points - _RECALL_EPS)
        if reached.size:
            total += envelope[reached[0]]
    return float(total / cfg.ap_points)


def evaluate_dataset(
    per_scene_dets: Sequence[Sequence[Detection]],
    per_scene_gts: Sequence[Sequence[Box3D]],
    cfg: EvalConfig,
) -> float:
    """Match per scene, then pool every detection under one global score sort."""
    if len(per_scene_dets) != len(per_scene_gts):
        raise ValueError(
            f"{len(per_scene_dets)} detection lists vs {len(per_scene_gts)} label lists"
        )
    scores: List[np.ndarray] = []
    flags: List[np.ndarray] = []
    num_gts = 0
    for dets, gts in zip(per_scene_dets, per_scene_gts):
        result = match_detections(dets, gts, cfg)
        scores.append(result.scores)
        flags.append(result.tp)
        num_gts += result.num_gts
    if not scores:
        return 1.0
    all_scores = np.concatenate(scores)
    all_flags = np.concatenate(flags)
    order = np.argsort(-all_scores, kind="stable")
    ap = average_precision(all_flags[order], num_gts, cfg)
    logger.debug("AP %.4f over %d detections, %d gts", ap, all_flags.size, num_gts)
    return ap
