"""Vehicle side: one backbone pass per scene yields the feature and the detections."""

import asyncio
import logging
from typing import List, Optional, Sequence

from fleetaug.config.settings import DecodeConfig
from fleetaug.detection.head import AnchorGrid, HeadParams, decode_predictions, head_forward
from fleetaug.features.backbone import Backbone, extract_grid_feature, extract_set_feature
from fleetaug.features.voxelgrid import GridSpec, voxelize
from fleetaug.protocols.payload import (
    FeaturePayload,
    encode_payload,
    payload_sizes,
    quantize_detection,
)
from fleetaug.scenes import Scene
from fleetaug.seeding import derive_seed

logger = logging.getLogger(__name__)


def client_infer(
    bb: Backbone,
    head: HeadParams,
    scene: Scene,
    spec: GridSpec,
    decode: DecodeConfig = DecodeConfig(),
    anchors: Optional[AnchorGrid] = None,
    set_points: Optional[int] = None,
) -> FeaturePayload:
    """
    Produce the payload a vehicle sends for one scene.

    The head decodes detections from the very feature that is sent; the
    backbone runs once. Detections are quantized to what the wire format
    carries, so the payload equals its own decode.

    Args:
        bb: Frozen backbone
        head: Detection head
        scene: Unlabeled scene
        spec: Grid layout
        decode: Decoding thresholds and caps
        anchors: Anchor grid; built from ``spec`` when omitted
        set_points: When set, also attach a set feature of this size

    Raises:
        ValueError: If the backbone is not frozen
    """
    if not bb.frozen:
        raise ValueError("client inference requires a frozen backbone")
    anchors = anchors if anchors is not None else AnchorGrid(spec)
    feature = extract_grid_feature(bb, voxelize(scene.points, spec))
    detections = decode_predictions(
        head_forward(head, feature, anchors),
        anchors,
        decode.score_thresh,
        decode.nms_iou,
        decode.pre_max_size,
        decode.post_max_size,
    )
    set_feature = None
    if set_points is not None and scene.points.shape[0]:
        set_feature = extract_set_feature(
            bb, scene.points, feature, set_points, derive_seed(scene.scene_id, 0x5E7)
        )
    return FeaturePayload(
        feature,
        [quantize_detection(d) for d in detections],
        scene.scene_id,
        set_feature,
    )


class FleetClient:
    """
    One vehicle holding a frozen copy of the deployed model.

    Args:
        backbone: Deployed backbone; a frozen copy is kept
        head: Deployed head; a copy is kept
        spec: Grid layout
        decode: Decoding settings
        set_points: Attach set features of this size when set
        anchors: Anchor grid; built from ``spec`` when omitted
    """

    def __init__(
        self,
        backbone: Backbone,
        head: HeadParams,
        spec: GridSpec,
        decode: DecodeConfig = DecodeConfig(),
        set_points: Optional[int] = None,
        anchors: Optional[AnchorGrid] = None,
    ):
        self.backbone = backbone.copy()
        self.backbone.freeze()
        self.head = head.copy()
        self.spec = spec
        self.decode = decode
        self.set_points = set_points
        self.anchors = anchors if anchors is not None else AnchorGrid(spec)

    def infer(self, scene: Scene) -> FeaturePayload:
        return client_infer(
            self.backbone,
            self.head,
            scene,
            self.spec,
            self.decode,
            self.anchors,
            self.set_points,
        )

    def send(self, scene: Scene) -> bytes:
        """Infer and encode; the bytes are what goes over the wire."""
        payload = self.infer(scene)
        data = encode_payload(payload)
        feature_bytes, detection_bytes = payload_sizes(payload)
        logger.debug(
            "scene %d: %d detections, %d feature bytes, %d detection bytes",
            scene.scene_id,
            len(payload.detections),
            feature_bytes,
            detection_bytes,
        )
        return data


class FleetClientPool:
    """
    Runs many vehicles concurrently.

    Each scene is handled in a worker thread via ``asyncio.to_thread``; at
    most ``max_concurrency`` run at once. Results come back in scene order.
    """

    def __init__(self, client: FleetClient, max_concurrency: int = 4):
        if max_concurrency < 1:
            raise ValueError(f"max_concurrency must be >= 1, got {max_concurrency}")
        self.client = client
        self.max_concurrency = max_concurrency

    async def run(self, scenes: Sequence[Scene]) -> List[bytes]:
        semaphore = asyncio.Semaphore(self.max_concurrency)

        async def one(scene: Scene) -> bytes:
            async with semaphore:
                return await asyncio.to_thread(self.client.send, scene)

        results = await asyncio.gather(*(one(scene) for scene in scenes))
        logger.debug("client pool produced %d payloads", len(results))
        return list(results)

    def run_sync(self, scenes: Sequence[Scene]) -> List[bytes]:
        """Blocking wrapper around :meth:`run` for callers without an event loop."""
        return asyncio.run(self.run(scenes))
