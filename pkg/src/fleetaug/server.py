"""Server side: pretraining, payload intake and the semi-supervised training loop."""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from queue import Empty, Queue
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from fleetaug.augment.gtbank import GtDatabase, build_gt_database, sample_placements
from fleetaug.augment.policies import GtPlace, augment_points
from fleetaug.client import FleetClient, FleetClientPool
from fleetaug.config.settings import ExperimentConfig, PayloadMode, Policy
from fleetaug.detection.evaluation import EvalConfig, Metric, evaluate_dataset
from fleetaug.detection.head import (
    CAR_PRIOR,
    AnchorGrid,
    HeadParams,
    LossBreakdown,
    Targets,
    apply_update,
    assign_targets,
    batch_gradients,
    decode_predictions,
    head_forward,
    init_head,
    total_loss,
)
from fleetaug.features.backbone import Backbone, SetFeature, extract_grid_feature, init_backbone
from fleetaug.features.voxelgrid import BevFeature, voxelize
from fleetaug.geometry.boxes import Box3D
from fleetaug.handlers.base import HandlerContext, TrainingItem, UnlabeledItem
from fleetaug.handlers.policies import FeatureGtHandler, create_handler
from fleetaug.protocols.payload import FeaturePayload
from fleetaug.protocols.protocol import InvalidPayload, PayloadProtocol
from fleetaug.scenes import Scene, gen_scenes, scene_pairs
from fleetaug.seeding import derive_seed

logger = logging.getLogger(__name__)

# Stream keys; each derives an independent generator from the run seed
_SCENES, _BACKBONE, _HEAD, _PRETRAIN, _LABELED, _UNLABELED, _AUGMENT = range(7)


@dataclass(frozen=True)
class EpochMetrics:
    """One row of the metrics timeline; epoch 0 is right after pretraining."""

    epoch: int
    ap_bev: float
    ap_3d: float
    labeled_loss: LossBreakdown = field(default_factory=LossBreakdown.zero)
    unlabeled_loss: LossBreakdown = field(default_factory=LossBreakdown.zero)
    total: float = 0.0
    pseudo_labels: int = 0
    gt_samples: int = 0


@dataclass
class ExperimentResult:
    seed: int
    policy: Policy
    timeline: List[EpochMetrics]
    fingerprint_before: str  # backbone right after pretraining
    fingerprint_after: str  # backbone after the semi-supervised phase
    max_cross_overlap: float
    gt_sources: Set[int]
    labeled_ids: Tuple[int, ...]
    unlabeled_ids: Tuple[int, ...]
    invalid_payloads: int = 0
    head: Optional[HeadParams] = None  # after the semi-supervised phase

    @property
    def final(self) -> EpochMetrics:
        return self.timeline[-1]


@dataclass(frozen=True)
class SceneSplit:
    labeled: List[Scene]
    unlabeled: List[Scene]
    test: List[Scene]


def make_split(cfg: ExperimentConfig, seed: int) -> SceneSplit:
    """Labeled, unlabeled and held-out test scenes with consecutive, disjoint scene ids."""
    n_labeled, n_unlabeled = cfg.split()
    scene_seed = derive_seed(seed, _SCENES)
    return SceneSplit(
        gen_scenes(cfg.scene, scene_seed, n_labeled, 0),
        gen_scenes(cfg.scene, scene_seed, n_unlabeled, n_labeled),
        gen_scenes(cfg.scene, scene_seed, cfg.n_test, n_labeled + n_unlabeled),
    )


def anchor_grid(cfg: ExperimentConfig) -> AnchorGrid:
    """Anchors resting on the configured ground plane."""
    return AnchorGrid(cfg.grid, z_center=cfg.scene.ground_z + CAR_PRIOR[2] / 2.0)


def _accumulate(total: Optional[List[np.ndarray]], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
    if total is None:
        return list(grads)
    return [a + b for a, b in zip(total, grads)]


def pretrain(
    cfg: ExperimentConfig, labeled: Sequence[Scene], seed: int
) -> Tuple[Backbone, HeadParams]:
    """
    Supervised training of backbone and head with raw GT sampling.

    Args:
        cfg: Experiment settings
        labeled: Labeled scenes
        seed: Run seed

    Returns:
        (trainable backbone, head)
    """
    spec = cfg.grid
    backbone_spec = dataclasses.replace(
        cfg.backbone, seed=derive_seed(seed, _BACKBONE, cfg.backbone.seed)
    )
    bb = init_backbone(backbone_spec)
    head = init_head(backbone_spec.bev_channels(spec), derive_seed(seed, _HEAD))
    anchors = anchor_grid(cfg)
    db = build_gt_database(scene_pairs(labeled), [s.scene_id for s in labeled])

    for epoch in range(cfg.pretrain_epochs):
        order = np.random.default_rng(derive_seed(seed, _PRETRAIN, epoch)).permutation(len(labeled))
        losses = []
        for start in range(0, len(order), cfg.labeled_batch):
            items, caches = [], []
            for j, index in enumerate(order[start : start + cfg.labeled_batch]):
                scene = labeled[index]
                points, boxes = scene.points, list(scene.labels)
                if cfg.pretrain_gt_per_scene and len(db):
                    placements = sample_placements(
                        db,
                        boxes,
                        cfg.pretrain_gt_per_scene,
                        spec,
                        cfg.scene.ground_z,
                        derive_seed(seed, _PRETRAIN, epoch, start, j),
                    )
                    points, boxes = augment_points(points, boxes, GtPlace(tuple(placements)), db=db)
                feature, cache = bb.forward_with_cache(voxelize(points, spec))
                items.append((feature, boxes))
                caches.append(cache)
            loss, grads, d_features = batch_gradients(head, items, anchors, cfg.workers)
            backbone_grads = None
            for cache, d_feature in zip(caches, d_features):
                backbone_grads = _accumulate(backbone_grads, bb.backward(cache, d_feature))
            head = apply_update(head, grads, cfg.pretrain_lr)
            if backbone_grads is not None:
                bb.apply_gradients(backbone_grads, cfg.backbone_lr)
            losses.append(loss.total)
        logger.info("pretrain epoch %d: loss %.4f", epoch + 1, float(np.mean(losses)) if losses else 0.0)
    return bb, head


class PayloadQueue:
    """Thread-safe hand-off of decoded payloads, drained in scene_id order."""

    def __init__(self):
        self._queue: Queue = Queue()

    def put(self, item: Union[FeaturePayload, InvalidPayload]) -> None:
        self._queue.put(item)

    def drain(self) -> Tuple[List[FeaturePayload], List[InvalidPayload]]:
        payloads: List[FeaturePayload] = []
        invalid: List[InvalidPayload] = []
        while True:
            try:
                item = self._queue.get_nowait()
            except Empty:
                break
            if isinstance(item, InvalidPayload):
                invalid.append(item)
            else:
                payloads.append(item)
        payloads.sort(key=lambda p: p.scene_id)
        return payloads, invalid


def evaluate_model(
    bb: Backbone,
    head: HeadParams,
    scenes: Sequence[Scene],
    anchors: AnchorGrid,
    cfg: ExperimentConfig,
) -> Tuple[float, float]:
    """(AP_BEV, AP_3D) over ``scenes`` at ``cfg.eval_iou``."""
    if not scenes:
        return 0.0, 0.0
    detections = []
    for scene in scenes:
        feature = extract_grid_feature(bb, voxelize(scene.points, anchors.spec))
        detections.append(
            decode_predictions(
                head_forward(head, feature, anchors),
                anchors,
                cfg.eval_score_thresh,
                cfg.decode.nms_iou,
                cfg.decode.pre_max_size,
                cfg.decode.post_max_size,
            )
        )
    labels = [list(scene.labels) for scene in scenes]
    ap_bev = evaluate_dataset(detections, labels, EvalConfig(cfg.eval_iou, Metric.BEV))
    ap_3d = evaluate_dataset(detections, labels, EvalConfig(cfg.eval_iou, Metric.IOU_3D))
    return ap_bev, ap_3d


LabeledEntry = Tuple[TrainingItem, Union[List[Box3D], Targets]]


class FleetServer:
    """
    Receives vehicle payloads and runs the semi-supervised phase.

    Args:
        cfg: Experiment settings
        backbone: Pretrained backbone; frozen here unless the policy trains it
        head: Pretrained head
        labeled: Labeled scenes; the GT database is built from these only
        seed: Run seed
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        backbone: Backbone,
        head: HeadParams,
        labeled: Sequence[Scene],
        seed: int,
    ):
        cfg.validate()
        if cfg.freeze_backbone:
            backbone.freeze()
        self.cfg = cfg
        self.seed = seed
        self.backbone = backbone
        self.head = head
        self.labeled = list(labeled)
        self.spec = cfg.grid
        self.anchors = anchor_grid(cfg)
        self.protocol = PayloadProtocol(self.spec, backbone.spec.bev_channels(self.spec))
        self.queue = PayloadQueue()
        self.handler = create_handler(cfg.policy)
        self.db: GtDatabase = build_gt_database(
            scene_pairs(self.labeled), [s.scene_id for s in self.labeled]
        )
        if not self.db.source_scenes() <= {s.scene_id for s in self.labeled}:
            raise RuntimeError("GT database holds entries from non-labeled scenes")
        self.context = HandlerContext(
            backbone=self.backbone,
            spec=self.spec,
            db=self.db,
            thresholds=cfg.thresholds,
            gt_per_scene=cfg.gt_per_scene,
            ground_z=cfg.scene.ground_z,
            noise_sigma=cfg.noise_sigma,
            frs_ratio=cfg.frs_ratio,
        )
        self.invalid: List[InvalidPayload] = []
        self._raw_points: Dict[int, np.ndarray] = {}
        self._labeled_cache: Dict[int, Tuple[BevFeature, Targets]] = {}

    def receive(self, data: bytes) -> None:
        """Decode one payload into the queue; undecodable bytes are queued as invalid."""
        self.queue.put(self.protocol.decode(data))

    def attach_raw(self, scene: Scene) -> None:
        """Keep a raw cloud for raw-level upcycling."""
        self._raw_points[scene.scene_id] = scene.points

    def drain(self) -> List[UnlabeledItem]:
        """Everything received so far as unlabeled items in scene_id order."""
        payloads, invalid = self.queue.drain()
        self.invalid.extend(invalid)
        return [UnlabeledItem(p, self._raw_points.get(p.scene_id)) for p in payloads]

    def augment_set_payload(self, item: UnlabeledItem, seed: int) -> SetFeature:
        """Set-type feature-level GT sampling on the payload's set feature."""
        handler = self.handler if isinstance(self.handler, FeatureGtHandler) else FeatureGtHandler()
        return handler.augment_set_payload(item, self.context, seed, self.cfg.set_ratio_multiplier)

    def _labeled_entry(self, scene: Scene) -> LabeledEntry:
        if self.cfg.policy.trains_backbone:
            feature, cache = self.backbone.forward_with_cache(voxelize(scene.points, self.spec))
            return TrainingItem(feature, list(scene.labels), cache=cache), list(scene.labels)
        if scene.scene_id not in self._labeled_cache:
            feature = extract_grid_feature(self.backbone, voxelize(scene.points, self.spec))
            self._labeled_cache[scene.scene_id] = (feature, assign_targets(self.anchors, scene.labels))
        feature, targets = self._labeled_cache[scene.scene_id]
        return TrainingItem(feature, list(scene.labels)), targets

    def train_epoch(
        self, epoch: int, unlabeled: Sequence[UnlabeledItem], test: Sequence[Scene]
    ) -> EpochMetrics:
        """
        One pass over the labeled scenes, each batch joined by unlabeled items.

        Labeled order and unlabeled draws come from separate streams, and the
        unlabeled gradient is not added at all when w is 0, so in that case the
        parameters follow the labeled-only trajectory exactly.
        """
        cfg = self.cfg
        ratio_l, ratio_u = cfg.effective_batch_ratio()
        per_batch = (cfg.labeled_batch * ratio_u) // ratio_l if unlabeled else 0
        labeled_order = np.random.default_rng(derive_seed(self.seed, _LABELED, epoch)).permutation(
            len(self.labeled)
        )
        unlabeled_order = np.random.default_rng(derive_seed(self.seed, _UNLABELED, epoch)).permutation(
            len(unlabeled)
        )

        labeled_losses: List[LossBreakdown] = []
        unlabeled_losses: List[LossBreakdown] = []
        pseudo_count = gt_count = 0
        cursor = 0
        for step in range(math.ceil(len(self.labeled) / cfg.labeled_batch)):
            chosen = labeled_order[step * cfg.labeled_batch : (step + 1) * cfg.labeled_batch]
            entries = [self._labeled_entry(self.labeled[i]) for i in chosen]
            loss_l, grads, d_labeled = batch_gradients(
                self.head, [(item.feature, target) for item, target in entries], self.anchors, cfg.workers
            )
            labeled_losses.append(loss_l)

            items: List[TrainingItem] = []
            for j in range(per_batch):
                source = unlabeled[int(unlabeled_order[cursor % len(unlabeled)])]
                cursor += 1
                items.append(self.handler.handle(source, self.context, derive_seed(self.seed, _AUGMENT, epoch, step, j)))
            loss_u = LossBreakdown.zero()
            d_unlabeled: List[np.ndarray] = []
            if items:
                loss_u, grads_u, d_unlabeled = batch_gradients(
                    self.head, [(t.feature, t.labels) for t in items], self.anchors, cfg.workers
                )
                if cfg.w != 0:
                    grads = grads + grads_u.scaled(cfg.w)
                pseudo_count += sum(t.num_pseudo for t in items)
                gt_count += sum(t.num_gt for t in items)
            unlabeled_losses.append(loss_u)

            if cfg.policy.trains_backbone:
                self._update_backbone([item for item, _ in entries], d_labeled, items, d_unlabeled)
            self.head = apply_update(self.head, grads, cfg.lr)

        labeled_loss = LossBreakdown.mean(labeled_losses)
        unlabeled_loss = LossBreakdown.mean(unlabeled_losses)
        ap_bev, ap_3d = evaluate_model(self.backbone, self.head, test, self.anchors, cfg)
        metrics = EpochMetrics(
            epoch,
            ap_bev,
            ap_3d,
            labeled_loss,
            unlabeled_loss,
            total_loss(labeled_loss, unlabeled_loss, cfg.w),
            pseudo_count,
            gt_count,
        )
        logger.info(
            "epoch %d: AP_BEV %.4f AP_3D %.4f loss %.4f (labeled %.4f, unlabeled %.4f)",
            epoch,
            ap_bev,
            ap_3d,
            metrics.total,
            labeled_loss.total,
            unlabeled_loss.total,
        )
        return metrics

    def _update_backbone(
        self,
        labeled: Sequence[TrainingItem],
        d_labeled: Sequence[np.ndarray],
        unlabeled: Sequence[TrainingItem],
        d_unlabeled: Sequence[np.ndarray],
    ) -> None:
        grads = None
        for item, d_feature in zip(labeled, d_labeled):
            grads = _accumulate(grads, self.backbone.backward(item.cache, d_feature))
        if self.cfg.w != 0:
            for item, d_feature in zip(unlabeled, d_unlabeled):
                if item.cache is not None:
                    grads = _accumulate(grads, self.backbone.backward(item.cache, d_feature * self.cfg.w))
        if grads is not None:
            self.backbone.apply_gradients(grads, self.cfg.backbone_lr)

    def train(
        self, unlabeled: Sequence[UnlabeledItem], test: Sequence[Scene], epochs: Optional[int] = None
    ) -> List[EpochMetrics]:
        """Epoch-0 evaluation followed by ``epochs`` (default ``cfg.epochs``) training epochs."""
        ap_bev, ap_3d = evaluate_model(self.backbone, self.head, test, self.anchors, self.cfg)
        logger.info("epoch 0: AP_BEV %.4f AP_3D %.4f", ap_bev, ap_3d)
        timeline = [EpochMetrics(0, ap_bev, ap_3d)]
        for epoch in range(1, (self.cfg.epochs if epochs is None else epochs) + 1):
            timeline.append(self.train_epoch(epoch, unlabeled, test))
        return timeline


def make_client(cfg: ExperimentConfig, backbone: Backbone, head: HeadParams) -> FleetClient:
    """A vehicle holding the deployed model, configured from ``cfg``."""
    return FleetClient(
        backbone,
        head,
        cfg.grid,
        cfg.decode,
        cfg.set_points if cfg.payload_kind is PayloadMode.GRID_SET else None,
        anchors=anchor_grid(cfg),
    )


def run_experiment(cfg: ExperimentConfig, seed: Optional[int] = None) -> ExperimentResult:
    """
    Full run for one seed: pretrain, freeze, collect payloads, train, evaluate.

    Args:
        cfg: Experiment settings
        seed: Run seed; defaults to the first of ``cfg.seeds``

    Raises:
        ConfigError: If the config is inconsistent
    """
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    split = make_split(cfg, seed)
    backbone, head = pretrain(cfg, split.labeled, seed)
    server = FleetServer(cfg, backbone, head, split.labeled, seed)
    fingerprint_before = server.backbone.fingerprint()

    pool = FleetClientPool(make_client(cfg, server.backbone, server.head), cfg.workers)
    for data in pool.run_sync(split.unlabeled):
        server.receive(data)
    if cfg.policy.trains_backbone:
        for scene in split.unlabeled:
            server.attach_raw(scene)
    unlabeled = server.drain()

    timeline = server.train(unlabeled, split.test)
    return ExperimentResult(
        seed=seed,
        policy=cfg.policy,
        timeline=timeline,
        fingerprint_before=fingerprint_before,
        fingerprint_after=server.backbone.fingerprint(),
        max_cross_overlap=server.context.max_cross_overlap,
        gt_sources=server.db.source_scenes(),
        labeled_ids=tuple(s.scene_id for s in split.labeled),
        unlabeled_ids=tuple(s.scene_id for s in split.unlabeled),
        invalid_payloads=len(server.invalid),
        head=server.head,
    )


def run_all(cfg: ExperimentConfig) -> List[ExperimentResult]:
    """One run per configured seed."""
    return [run_experiment(cfg, seed) for seed in cfg.seeds]
