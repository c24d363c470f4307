"""Greedy rotated non-maximum suppression."""

from typing import List, Optional, Sequence

import numpy as np

from fleetaug.geometry.boxes import Detection, boxes_array
from fleetaug.geometry.iou import iou_bev_matrix


def nms_bev(
    dets: Sequence[Detection],
    iou_threshold: float,
    pre_max_size: Optional[int] = None,
    post_max_size: Optional[int] = None,
) -> List[Detection]:
    """
    Greedy BEV NMS ranked by ``cls_conf``.

    A detection is dropped when its BEV IoU with an already kept detection
    exceeds ``iou_threshold``. Equal scores keep the lower input index first.

    Args:
        dets: Candidate detections
        iou_threshold: Suppression threshold in [0, 1]
        pre_max_size: Keep only this many top-scoring candidates before NMS
        post_max_size: Truncate the kept list to this length

    Returns:
        Kept detections in descending score order
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if not dets:
        return []

    scores = np.array([d.cls_conf for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if pre_max_size is not None:
        order = order[:pre_max_size]

    boxes = boxes_array(dets[i].box for i in order)
    overlaps = iou_bev_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    kept: List[Detection] = []
    for rank, index in enumerate(order):
        if suppressed[rank]:
            continue
        kept.append(dets[index])
        if post_max_size is not None and len(kept) >= post_max_size:
            break
        suppressed |= overlaps[rank] > iou_threshold
    return kept
