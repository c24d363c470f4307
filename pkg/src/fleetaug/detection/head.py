"""Anchor-based detection head with an IoU branch, its loss and analytic gradients."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from fleetaug.features.voxelgrid import BevFeature, GridSpec
from fleetaug.geometry.boxes import Box3D, Detection, boxes_array, normalize_yaw_array
from fleetaug.geometry.iou import iou_bev_matrix
from fleetaug.geometry.nms import nms_bev

logger = logging.getLogger(__name__)

CAR_PRIOR = (3.9, 1.6, 1.56)  # length, width, height in meters
ANCHOR_YAWS = (0.0, math.pi / 2)
POS_IOU = 0.6
NEG_IOU = 0.45
SMOOTH_L1_BETA = 1.0 / 9.0
LOGIT_CAP = 30.0

# Per-anchor output layout: cls logit, 7 box deltas, iou logit
OUT_DIM = 9
_CLS = 0
_DELTAS = slice(1, 8)
_IOU = 8

POSITIVE, NEGATIVE, IGNORED = 1, 0, -1


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """One anchor per BEV cell per yaw hypothesis."""

    spec: GridSpec
    z_center: float = -1.6 + CAR_PRIOR[2] / 2.0
    dims: Tuple[float, float, float] = CAR_PRIOR
    yaws: Tuple[float, ...] = ANCHOR_YAWS
    boxes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        xs, ys = self.spec.cell_centers()
        cells = xs.size
        per_yaw = len(self.yaws)
        boxes = np.empty((cells, per_yaw, 7), dtype=np.float64)
        boxes[:, :, 0] = xs.reshape(-1, 1)
        boxes[:, :, 1] = ys.reshape(-1, 1)
        boxes[:, :, 2] = self.z_center
        boxes[:, :, 3] = self.dims[0]
        boxes[:, :, 4] = self.dims[1]
        boxes[:, :, 5] = self.dims[2]
        boxes[:, :, 6] = np.asarray(self.yaws, dtype=np.float64)[None, :]
        boxes = boxes.reshape(-1, 7)
        boxes.setflags(write=False)
        object.__setattr__(self, "boxes", boxes)

    @property
    def num_yaws(self) -> int:
        return len(self.yaws)

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


@dataclass(eq=False)
class HeadParams:
    """Per-yaw affine maps from a C-dim BEV cell vector to the 9 head outputs."""

    weights: np.ndarray  # (num_yaws, C, OUT_DIM)
    bias: np.ndarray  # (num_yaws, OUT_DIM)

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[2] != OUT_DIM:
            raise ValueError(f"weights must have shape (Y, C, {OUT_DIM}), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0], OUT_DIM):
            raise ValueError(f"bias must have shape ({self.weights.shape[0]}, {OUT_DIM})")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("head parameters must be finite")

    @property
    def channels(self) -> int:
        return int(self.weights.shape[1])

    def copy(self) -> "HeadParams":
        return HeadParams(self.weights.copy(), self.bias.copy())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {"head.weights": self.weights, "head.bias": self.bias}

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray]) -> "HeadParams":
        return cls(state["head.weights"], state["head.bias"])


@dataclass(eq=False)
class HeadGradients:
    weights: np.ndarray
    bias: np.ndarray

    def __add__(self, other: "HeadGradients") -> "HeadGradients":
        return HeadGradients(self.weights + other.weights, self.bias + other.bias)

    def scaled(self, factor: float) -> "HeadGradients":
        return HeadGradients(self.weights * factor, self.bias * factor)


@dataclass(frozen=True)
class Predictions:
    cls_logit: np.ndarray  # (A,)
    deltas: np.ndarray  # (A, 7)
    iou_logit: np.ndarray  # (A,)

    def __len__(self) -> int:
        return int(self.cls_logit.shape[0])


@dataclass(frozen=True)
class Targets:
    state: np.ndarray  # (A,) POSITIVE / NEGATIVE / IGNORED
    deltas: np.ndarray  # (A, 7), meaningful for positives
    iou: np.ndarray  # (A,), meaningful for positives

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.state == POSITIVE))


@dataclass(frozen=True)
class LossBreakdown:
    """The three head loss terms and their sum."""

    loc_rpn: float
    cls_rpn: float
    loc_iou: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.loc_rpn + self.loc_iou + self.cls_rpn)

    @classmethod
    def zero(cls) -> "LossBreakdown":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def mean(cls, items: Sequence["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return cls.zero()
        count = len(items)
        return cls(
            sum(i.loc_rpn for i in items) / count,
            sum(i.cls_rpn for i in items) / count,
            sum(i.loc_iou for i in items) / count,
        )


def init_head(channels: int, seed: int, num_yaws: int = len(ANCHOR_YAWS), prior: float = 0.01) -> HeadParams:
    """Small random weights; the class bias starts at the logit of ``prior``."""
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 0.01, size=(num_yaws, channels, OUT_DIM))
    bias = np.zeros((num_yaws, OUT_DIM))
    bias[:, _CLS] = -math.log((1.0 - prior) / prior)
    return HeadParams(weights, bias)


def _check_shapes(p: HeadParams, f: BevFeature, anchors: AnchorGrid) -> None:
    if f.channels != p.channels:
        raise ValueError(f"feature has {f.channels} channels, head expects {p.channels}")
    if (f.height, f.width) != (anchors.spec.height, anchors.spec.width):
        raise ValueError("feature and anchor grid sizes differ")
    if p.weights.shape[0] != anchors.num_yaws:
        raise ValueError("head and anchor grid disagree on the number of yaws")


def _raw_outputs(p: HeadParams, f: BevFeature) -> Tuple[np.ndarray, np.ndarray]:
    features = f.values.reshape(-1, f.channels).astype(np.float64)
    out = np.einsum("nc,yco->nyo", features, p.weights) + p.bias[None, :, :]
    return features, out.reshape(-1, OUT_DIM)


def head_forward(p: HeadParams, f: BevFeature, anchors: AnchorGrid) -> Predictions:
    """Affine head on every cell; absent cells see a zero vector."""
    _check_shapes(p, f, anchors)
    _, out = _raw_outputs(p, f)
    return Predictions(out[:, _CLS].copy(), out[:, _DELTAS].copy(), out[:, _IOU].copy())


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Box deltas of ``boxes`` relative to aligned ``anchors``, both (N, 7)."""
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    deltas = np.empty_like(boxes)
    deltas[:, 0] = (boxes[:, 0] - anchors[:, 0]) / diag
    deltas[:, 1] = (boxes[:, 1] - anchors[:, 1]) / diag
    deltas[:, 2] = (boxes[:, 2] - anchors[:, 2]) / anchors[:, 5]
    deltas[:, 3] = np.log(boxes[:, 3] / anchors[:, 3])
    deltas[:, 4] = np.log(boxes[:, 4] / anchors[:, 4])
    deltas[:, 5] = np.log(boxes[:, 5] / anchors[:, 5])
    deltas[:, 6] = boxes[:, 6] - anchors[:, 6]
    return deltas


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; yaw normalized to (-pi, pi]."""
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    boxes = np.empty_like(deltas)
    boxes[:, 0] = deltas[:, 0] * diag + anchors[:, 0]
    boxes[:, 1] = deltas[:, 1] * diag + anchors[:, 1]
    boxes[:, 2] = deltas[:, 2] * anchors[:, 5] + anchors[:, 2]
    size = np.exp(np.clip(deltas[:, 3:6], -10.0, 10.0))
    boxes[:, 3:6] = size * anchors[:, 3:6]
    boxes[:, 6] = normalize_yaw_array(deltas[:, 6] + anchors[:, 6])
    return boxes


def assign_targets(anchors: AnchorGrid, labels: Sequence[Box3D]) -> Targets:
    """
    Match anchors to labels by BEV IoU.

    Positive at IoU >= 0.6, negative below 0.45, ignored in between; each
    label's best anchor is forced positive. Positives regress toward their
    matched label and predict the matched IoU.
    """
    count = len(anchors)
    state = np.full(count, NEGATIVE, dtype=np.int8)
    deltas = np.zeros((count, 7), dtype=np.float64)
    iou_target = np.zeros(count, dtype=np.float64)
    if not labels:
        return Targets(state, deltas, iou_target)

    label_boxes = boxes_array(labels)
    overlaps = iou_bev_matrix(anchors.boxes, label_boxes)
    matched = np.argmax(overlaps, axis=1)
    best = overlaps[np.arange(count), matched]
    state[best >= NEG_IOU] = IGNORED
    state[best >= POS_IOU] = POSITIVE
    for j in range(label_boxes.shape[0]):
        anchor = int(np.argmax(overlaps[:, j]))
        state[anchor] = POSITIVE
        matched[anchor] = j
        best[anchor] = overlaps[anchor, j]

    positive = np.flatnonzero(state == POSITIVE)
    deltas[positive] = encode_boxes(anchors.boxes[positive], label_boxes[matched[positive]])
    iou_target[positive] = best[positive]
    return Targets(state, deltas, iou_target)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _smooth_l1(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    small = np.abs(x) < SMOOTH_L1_BETA
    value = np.where(small, 0.5 * x * x / SMOOTH_L1_BETA, np.abs(x) - 0.5 * SMOOTH_L1_BETA)
    grad = np.where(small, x / SMOOTH_L1_BETA, np.sign(x))
    return value, grad


def _loss_and_output_grads(
    preds: Predictions, targets: Targets
) -> Tuple[LossBreakdown, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    if len(preds) != targets.state.shape[0]:
        raise ValueError(f"{len(preds)} predictions vs {targets.state.shape[0]} targets")
    positive = targets.state == POSITIVE
    cared = targets.state != IGNORED
    norm = float(max(1, int(positive.sum())))

    residual = preds.deltas[positive] - targets.deltas[positive]
    loc_value, loc_grad = _smooth_l1(residual)
    d_deltas = np.zeros_like(preds.deltas)
    d_deltas[positive] = loc_grad / norm

    logits = np.clip(preds.cls_logit, -LOGIT_CAP, LOGIT_CAP)
    target = positive.astype(np.float64)
    bce = _softplus(logits) - target * logits
    uncapped = np.abs(preds.cls_logit) <= LOGIT_CAP
    d_cls = np.where(cared & uncapped, (_sigmoid(logits) - target) / norm, 0.0)

    iou_logits = np.clip(preds.iou_logit, -LOGIT_CAP, LOGIT_CAP)
    iou_prob = _sigmoid(iou_logits)
    iou_value, iou_grad = _smooth_l1(iou_prob[positive] - targets.iou[positive])
    d_iou = np.zeros_like(preds.iou_logit)
    iou_uncapped = np.abs(preds.iou_logit[positive]) <= LOGIT_CAP
    d_iou[positive] = np.where(
        iou_uncapped, iou_grad * iou_prob[positive] * (1.0 - iou_prob[positive]) / norm, 0.0
    )

    loss = LossBreakdown(
        loc_rpn=float(loc_value.sum() / norm),
        cls_rpn=float(bce[cared].sum() / norm),
        loc_iou=float(iou_value.sum() / norm),
    )
    return loss, (d_cls, d_deltas, d_iou)


def compute_loss(preds: Predictions, targets: Targets) -> LossBreakdown:
    """
    Head loss terms, each normalized by max(1, #positives).

    loc_rpn is smooth-L1 (beta 1/9) on positive deltas, cls_rpn is sigmoid
    cross-entropy over positives and negatives, loc_iou is smooth-L1 between
    the IoU branch probability and the matched IoU on positives.
    """
    loss, _ = _loss_and_output_grads(preds, targets)
    return loss


def total_loss(labeled: LossBreakdown, unlabeled: LossBreakdown, w: float) -> float:
    """Supervised total plus ``w`` times the unsupervised total."""
    if w < 0:
        raise ValueError(f"w must be >= 0, got {w}")
    return labeled.total + w * unlabeled.total


def loss_and_gradients(
    p: HeadParams, f: BevFeature, anchors: AnchorGrid, targets: Targets
) -> Tuple[LossBreakdown, HeadGradients, np.ndarray]:
    """
    Loss with gradients for the head parameters and for the input feature.

    Returns:
        (loss, parameter gradients, feature gradient of shape (H, W, C))
    """
    _check_shapes(p, f, anchors)
    features, out = _raw_outputs(p, f)
    preds = Predictions(out[:, _CLS], out[:, _DELTAS], out[:, _IOU])
    loss, (d_cls, d_deltas, d_iou) = _loss_and_output_grads(preds, targets)

    d_out = np.empty_like(out)
    d_out[:, _CLS] = d_cls
    d_out[:, _DELTAS] = d_deltas
    d_out[:, _IOU] = d_iou
    d_out = d_out.reshape(features.shape[0], anchors.num_yaws, OUT_DIM)

    grads = HeadGradients(
        np.einsum("nc,nyo->yco", features, d_out),
        d_out.sum(axis=0),
    )
    d_feature = np.einsum("nyo,yco->nc", d_out, p.weights).reshape(f.values.shape)
    return loss, grads, d_feature


BatchItem = Tuple[BevFeature, Union[Sequence[Box3D], Targets]]


def batch_gradients(
    p: HeadParams,
    batch: Sequence[BatchItem],
    anchors: AnchorGrid,
    max_workers: Optional[int] = None,
) -> Tuple[LossBreakdown, HeadGradients, List[np.ndarray]]:
    """
    Mean loss and mean parameter gradient over a batch.

    Items may be evaluated on a thread pool; results are reduced in batch
    order so the sum is bit-stable.

    Returns:
        (mean loss, mean gradients, per-item feature gradients scaled by 1/len(batch))
    """
    if not batch:
        zero = HeadGradients(np.zeros_like(p.weights), np.zeros_like(p.bias))
        return LossBreakdown.zero(), zero, []

    def evaluate(item: BatchItem):
        feature, labels = item
        targets = labels if isinstance(labels, Targets) else assign_targets(anchors, labels)
        return loss_and_gradients(p, feature, anchors, targets)

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(evaluate, batch))
    else:
        results = [evaluate(item) for item in batch]

    scale = 1.0 / len(batch)
    grads = results[0][1]
    for _, item_grads, _ in results[1:]:
        grads = grads + item_grads
    losses = [loss for loss, _, _ in results]
    d_features = [d_feature * scale for _, _, d_feature in results]
    return LossBreakdown.mean(losses), grads.scaled(scale), d_features


def apply_update(p: HeadParams, grads: HeadGradients, lr: float) -> HeadParams:
    """One gradient-descent step; returns new parameters."""
    return HeadParams(p.weights - lr * grads.weights, p.bias - lr * grads.bias)


def train_step(
    p: HeadParams,
    batch: Sequence[BatchItem],
    lr: float,
    anchors: Optional[AnchorGrid] = None,
    max_workers: Optional[int] = None,
) -> Tuple[HeadParams, LossBreakdown]:
    """
    One gradient-descent update on the mean batch loss.

    Args:
        p: Current parameters (left untouched)
        batch: (feature, labels or precomputed targets) pairs
        lr: Learning rate, >= 0
        anchors: Anchor grid; defaults to the grid of the first feature
        max_workers: Optional thread count for per-item evaluation

    Returns:
        (updated parameters, mean loss before the update)
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if not batch:
        return p.copy(), LossBreakdown.zero()
    if anchors is None:
        anchors = AnchorGrid(batch[0][0].spec)
    loss, grads, _ = batch_gradients(p, batch, anchors, max_workers)
    if lr == 0:
        return p.copy(), loss
    return apply_update(p, grads, lr), loss


def decode_predictions(
    preds: Predictions,
    anchors: AnchorGrid,
    score_thresh: float,
    nms_iou: float,
    pre_max_size: Optional[int] = 1000,
    post_max_size: Optional[int] = 100,
    class_id: int = 0,
) -> List[Detection]:
    """
    Turn head outputs into detections.

    Anchors with sigmoid(cls_logit) >= ``score_thresh`` are decoded, the
    top ``pre_max_size`` go through BEV NMS at ``nms_iou``.
    """
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must be in [0, 1]")
    scores = _sigmoid(np.clip(preds.cls_logit, -LOGIT_CAP, LOGIT_CAP))
    candidates = np.flatnonzero(scores >= score_thresh)
    if candidates.size == 0:
        return []
    order = candidates[np.argsort(-scores[candidates], kind="stable")]
    if pre_max_size is not None:
        order = order[:pre_max_size]
    boxes = decode_boxes(anchors.boxes[order], preds.deltas[order])
    iou_conf = _sigmoid(np.clip(preds.iou_logit[order], -LOGIT_CAP, LOGIT_CAP))
    dets = [
        Detection(Box3D.from_array(box, class_id), float(scores[i]), float(q))
        for box, i, q in zip(boxes, order, iou_conf)
    ]
    return nms_bev(dets, nms_iou, post_max_size=post_max_size)
