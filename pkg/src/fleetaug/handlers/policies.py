"""Concrete handlers, one per augmentation policy."""

import logging
from typing import Callable, List, Sequence, Tuple

import numpy as np

from fleetaug.augment.analysis import gt_only_feature
from fleetaug.augment.fgt import f_gt_grid, f_gt_set
from fleetaug.augment.gtbank import Placement, sample_placements
from fleetaug.augment.policies import (
    FCompose,
    FeaturePolicy,
    FFlip,
    FNoise,
    FRS,
    FRotate,
    GtPlace,
    augment_points,
    perturb_feature,
    transform_labels,
)
from fleetaug.config.settings import Policy
from fleetaug.detection.pseudolabel import (
    HybridLabelSet,
    filter_detections,
    make_hybrid,
    max_cross_overlap,
)
from fleetaug.features.backbone import SetFeature, extract_set_feature
from fleetaug.features.voxelgrid import nonzero_cell_count, voxelize
from fleetaug.geometry.boxes import Box3D
from fleetaug.handlers.base import BaseHandler, HandlerContext, TrainingItem, UnlabeledItem
from fleetaug.seeding import derive_seed

logger = logging.getLogger(__name__)


def _pseudo_labels(item: UnlabeledItem, context: HandlerContext) -> List[Box3D]:
    return filter_detections(item.payload.detections, context.thresholds)


def _place_and_merge(
    pseudo: Sequence[Box3D], context: HandlerContext, seed: int
) -> Tuple[List[Placement], HybridLabelSet]:
    placements = sample_placements(
        context.db, pseudo, context.gt_per_scene, context.spec, context.ground_z, seed
    )
    hybrid = make_hybrid(pseudo, placements)
    overlap = max_cross_overlap(hybrid)
    logger.debug("%d placements, max gt/pseudo overlap %.3g", len(placements), overlap)
    context.max_cross_overlap = max(context.max_cross_overlap, overlap)
    return placements, hybrid


class PseudoLabelHandler(BaseHandler):
    """No augmentation: the received feature with its filtered detections."""

    name = "None"

    def handle(self, item: UnlabeledItem, context: HandlerContext, seed: int) -> TrainingItem:
        pseudo = _pseudo_labels(item, context)
        return TrainingItem(item.payload.feature, pseudo, num_pseudo=len(pseudo))


class FeatureGtHandler(BaseHandler):
    """Feature-level GT sampling: paste GT-only feature cells over the scene feature."""

    name = "FGT"

    def handle(self, item: UnlabeledItem, context: HandlerContext, seed: int) -> TrainingItem:
        pseudo = _pseudo_labels(item, context)
        placements, hybrid = _place_and_merge(pseudo, context, seed)
        if not placements:
            return TrainingItem(item.payload.feature, pseudo, num_pseudo=len(pseudo))
        gt_feature = gt_only_feature(context.backbone, placements, context.spec)
        feature = f_gt_grid(item.payload.feature, gt_feature)
        return TrainingItem(
            feature, hybrid.boxes(), num_pseudo=len(pseudo), num_gt=len(placements)
        )

    def augment_set_payload(
        self,
        item: UnlabeledItem,
        context: HandlerContext,
        seed: int,
        ratio_multiplier: float = 1.0,
    ) -> SetFeature:
        """
        Set-type counterpart: mix scene and GT-only keypoints.

        Raises:
            ValueError: If the payload carries no set feature
        """
        scene_set = item.payload.set_feature
        if scene_set is None:
            raise ValueError("payload has no set feature")
        pseudo = _pseudo_labels(item, context)
        placements, _ = _place_and_merge(pseudo, context, seed)
        if not placements:
            return scene_set
        gt_feature = gt_only_feature(context.backbone, placements, context.spec)
        gt_cloud = np.concatenate([p.world_points() for p in placements], axis=0)
        gt_set = extract_set_feature(
            context.backbone, gt_cloud, gt_feature, scene_set.n, derive_seed(seed, 1)
        )
        return f_gt_set(
            scene_set,
            gt_set,
            [p.box for p in placements],
            max(1, nonzero_cell_count(item.payload.feature)),
            max(1, nonzero_cell_count(gt_feature)),
            scene_set.n,
            derive_seed(seed, 2),
            ratio_multiplier,
        )


class FeaturePerturbHandler(BaseHandler):
    """Comparison policies: perturb the feature, move pseudo labels to match."""

    def __init__(
        self,
        name: str,
        make_policy: Callable[[np.random.Generator, HandlerContext], FeaturePolicy],
    ):
        self.name = name
        self._make_policy = make_policy

    def handle(self, item: UnlabeledItem, context: HandlerContext, seed: int) -> TrainingItem:
        rng = np.random.default_rng(derive_seed(seed, 0))
        policy = self._make_policy(rng, context)
        feature = perturb_feature(item.payload.feature, policy, derive_seed(seed, 1))
        pseudo = _pseudo_labels(item, context)
        labels = transform_labels(pseudo, policy, context.spec)
        return TrainingItem(feature, labels, num_pseudo=len(labels))


class RawUpcycleHandler(BaseHandler):
    """
    Raw-level upcycling: GT sampling on the raw unlabeled cloud, then a fresh
    backbone pass that gradients flow back through.
    """

    name = "RawUpcycle"

    def handle(self, item: UnlabeledItem, context: HandlerContext, seed: int) -> TrainingItem:
        if item.points is None:
            raise ValueError(f"scene {item.payload.scene_id}: RawUpcycle needs the raw cloud")
        pseudo = _pseudo_labels(item, context)
        placements, hybrid = _place_and_merge(pseudo, context, seed)
        points, _ = augment_points(item.points, [], GtPlace(tuple(placements)), db=context.db)
        feature, cache = context.backbone.forward_with_cache(voxelize(points, context.spec))
        return TrainingItem(
            feature, hybrid.boxes(), cache=cache, num_pseudo=len(pseudo), num_gt=len(placements)
        )


def create_handler(policy: Policy) -> BaseHandler:
    """Handler for a configured policy."""
    if policy is Policy.NONE:
        return PseudoLabelHandler()
    if policy is Policy.FGT:
        return FeatureGtHandler()
    if policy is Policy.RAW_UPCYCLE:
        return RawUpcycleHandler()
    factories = {
        Policy.FFLIP: lambda rng, ctx: FFlip(),
        Policy.FROTATE: lambda rng, ctx: FRotate.random(rng),
        Policy.FNOISE: lambda rng, ctx: FNoise(ctx.noise_sigma),
        Policy.FRS: lambda rng, ctx: FRS(ctx.frs_ratio),
        Policy.F3DIOUMATCH: lambda rng, ctx: FCompose((FFlip(), FRS(ctx.frs_ratio))),
    }
    return FeaturePerturbHandler(policy.value, factories[policy])
