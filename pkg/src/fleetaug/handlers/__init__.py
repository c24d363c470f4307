"""Per-policy handling of unlabeled payloads."""

from fleetaug.handlers.base import BaseHandler, HandlerContext, TrainingItem, UnlabeledItem
from fleetaug.handlers.policies import (
    FeatureGtHandler,
    FeaturePerturbHandler,
    PseudoLabelHandler,
    RawUpcycleHandler,
    create_handler,
)

__all__ = [
    "BaseHandler",
    "FeatureGtHandler",
    "FeaturePerturbHandler",
    "HandlerContext",
    "PseudoLabelHandler",
    "RawUpcycleHandler",
    "TrainingItem",
    "UnlabeledItem",
    "create_handler",
]
