"""Base interface for unlabeled-payload handlers."""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from fleetaug.augment.gtbank import GtDatabase
from fleetaug.detection.pseudolabel import SslThresholds
from fleetaug.features.backbone import Backbone, ForwardCache
from fleetaug.features.voxelgrid import BevFeature, GridSpec
from fleetaug.geometry.boxes import Box3D
from fleetaug.protocols.payload import FeaturePayload


@dataclass(frozen=True)
class UnlabeledItem:
    """One received payload, plus the raw cloud when the server holds it."""

    payload: FeaturePayload
    points: Optional[np.ndarray] = None


@dataclass
class HandlerContext:
    """Server state a handler may read while augmenting one item."""

    backbone: Backbone
    spec: GridSpec
    db: GtDatabase
    thresholds: SslThresholds
    gt_per_scene: int = 5
    ground_z: float = -1.6
    noise_sigma: float = 0.05
    frs_ratio: float = 0.05
    max_cross_overlap: float = 0.0  # largest gt/pseudo BEV IoU seen so far


@dataclass
class TrainingItem:
    """
    Feature and labels ready for the head loss.

    ``cache`` is set when the feature came from a fresh backbone pass that
    gradients should flow back through.
    """

    feature: BevFeature
    labels: List[Box3D]
    cache: Optional[ForwardCache] = None
    num_pseudo: int = 0
    num_gt: int = 0


class BaseHandler(ABC):
    """Turns a received payload into a training item for one policy."""

    name: str = "base"

    @abstractmethod
    def handle(self, item: UnlabeledItem, context: HandlerContext, seed: int) -> TrainingItem:
        """
        Augment one unlabeled item.

        Args:
            item: Received payload
            context: Shared server state
            seed: Seed for this item in this epoch

        Returns:
            Training item
        """

    def describe(self) -> Tuple[str, ...]:
        """Short labels for logs."""
        return (self.name,)
