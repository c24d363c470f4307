"""Unit tests for server module."""

import numpy as np
import pytest

from fleetaug.augment import GtDatabase, GtEntry
from fleetaug.config import PayloadMode, Policy
from fleetaug.detection.head import CAR_PRIOR
from fleetaug.features import BevFeature
from fleetaug.geometry import Box3D
from fleetaug.protocols import FeaturePayload, InvalidPayload, encode_payload
from fleetaug.server import (
    FleetServer,
    PayloadQueue,
    anchor_grid,
    evaluate_model,
    make_client,
    make_split,
    pretrain,
)
from tests.conftest import small_config


@pytest.fixture(scope="module")
def setup():
    cfg = small_config()
    split = make_split(cfg, seed=0)
    backbone, head = pretrain(cfg, split.labeled, seed=0)
    return cfg, split, backbone, head


def new_server(setup, **changes):
    cfg, split, backbone, head = setup
    cfg = small_config(**changes) if changes else cfg
    return FleetServer(cfg, backbone.copy(), head.copy(), split.labeled, seed=0)


def collect(server, scenes):
    client = make_client(server.cfg, server.backbone, server.head)
    for scene in scenes:
        server.receive(client.send(scene))
    return server.drain()


class TestSplit:
    """Test scene splitting."""

    def test_disjoint_consecutive_ids(self):
        """Test labeled, unlabeled and test ids are consecutive and disjoint."""
        split = make_split(small_config(), seed=1)
        ids = [s.scene_id for s in split.labeled + split.unlabeled + split.test]
        assert ids == list(range(3 + 4 + 2))

    def test_label_ratio(self):
        """Test a label ratio moves scenes between labeled and unlabeled."""
        split = make_split(small_config(label_ratio=0.5), seed=1)
        assert (len(split.labeled), len(split.unlabeled)) == (4, 3)

    def test_deterministic(self):
        """Test equal seeds give equal splits."""
        assert make_split(small_config(), 3).labeled == make_split(small_config(), 3).labeled

    def test_anchors_on_ground(self):
        """Test anchors rest on the configured ground plane."""
        cfg = small_config()
        assert anchor_grid(cfg).z_center == pytest.approx(cfg.scene.ground_z + CAR_PRIOR[2] / 2)


class TestPretrain:
    """Test supervised pretraining."""

    def test_returns_trainable_model(self, setup):
        """Test pretraining yields an unfrozen backbone and a matching head."""
        cfg, _, backbone, head = setup
        assert not backbone.frozen
        assert head.channels == cfg.backbone.bev_channels(cfg.grid)

    def test_deterministic(self, setup):
        """Test pretraining twice with one seed gives identical weights."""
        cfg, split, backbone, head = setup
        again_bb, again_head = pretrain(cfg, split.labeled, seed=0)
        assert again_bb.fingerprint() == backbone.fingerprint()
        assert np.array_equal(again_head.weights, head.weights)


class TestPayloadQueue:
    """Test payload hand-off."""

    def test_drain_sorted(self, grid):
        """Test payloads drain in scene_id order with invalid ones separated."""
        queue = PayloadQueue()
        for scene_id in (5, 2, 9):
            queue.put(FeaturePayload(BevFeature.empty(grid, 1), [], scene_id))
        queue.put(InvalidPayload(b"x", ValueError("bad")))
        payloads, invalid = queue.drain()
        assert [p.scene_id for p in payloads] == [2, 5, 9]
        assert len(invalid) == 1
        assert queue.drain() == ([], [])


class TestEvaluateModel:
    """Test AP evaluation of a model."""

    def test_no_scenes(self, setup):
        """Test evaluating nothing gives zero AP."""
        cfg, _, backbone, head = setup
        assert evaluate_model(backbone, head, [], anchor_grid(cfg), cfg) == (0.0, 0.0)

    def test_range(self, setup):
        """Test AP values lie in [0, 1]."""
        cfg, split, backbone, head = setup
        ap_bev, ap_3d = evaluate_model(backbone, head, split.test, anchor_grid(cfg), cfg)
        assert 0.0 <= ap_3d <= 1.0
        assert 0.0 <= ap_bev <= 1.0


class TestFleetServer:
    """Test suite for FleetServer."""

    def test_freezes_backbone(self, setup):
        """Test feature-level policies freeze the backbone."""
        assert new_server(setup).backbone.frozen

    def test_gt_database_from_labeled_only(self, setup):
        """Test the GT database only holds labeled scenes."""
        server = new_server(setup)
        assert server.db.source_scenes() <= {s.scene_id for s in setup[1].labeled}

    def test_foreign_gt_source_rejected(self, setup, mocker):
        """Test a GT database with an unlabeled source is refused."""
        entry = GtEntry(Box3D(5, 0, -0.8, 3.9, 1.6, 1.56), np.ones((1, 4)), source_scene=999)
        mocker.patch("fleetaug.server.build_gt_database", return_value=GtDatabase((entry,)))
        with pytest.raises(RuntimeError, match="non-labeled"):
            new_server(setup)

    def test_receive_and_drain(self, setup):
        """Test received payloads drain in scene order and garbage is counted."""
        server = new_server(setup)
        unlabeled = setup[1].unlabeled
        client = make_client(server.cfg, server.backbone, server.head)
        for scene in reversed(unlabeled):
            server.receive(client.send(scene))
        server.receive(b"not a payload")
        items = server.drain()
        assert [i.payload.scene_id for i in items] == [s.scene_id for s in unlabeled]
        assert all(i.points is None for i in items)
        assert len(server.invalid) == 1

    def test_foreign_channel_count(self, setup):
        """Test a payload whose feature width disagrees with the backbone is set aside."""
        server = new_server(setup)
        foreign = FeaturePayload(BevFeature.empty(server.spec, 3), [], scene_id=5)
        server.receive(encode_payload(foreign))
        assert server.drain() == []
        assert len(server.invalid) == 1
        assert server.invalid[0].scene_id == 5
        assert "expected" in str(server.invalid[0].error)

    def test_attach_raw(self, setup):
        """Test raw clouds are paired with their payloads."""
        server = new_server(setup, policy=Policy.RAW_UPCYCLE, freeze_backbone=False)
        scene = setup[1].unlabeled[0]
        server.attach_raw(scene)
        items = collect(server, [scene])
        assert items[0].points is scene.points

    def test_timeline(self, setup):
        """Test train returns an epoch-0 row plus one row per epoch."""
        server = new_server(setup)
        items = collect(server, setup[1].unlabeled)
        timeline = server.train(items, setup[1].test, epochs=2)
        assert [m.epoch for m in timeline] == [0, 1, 2]
        assert timeline[0].total == 0.0
        assert timeline[1].labeled_loss.total > 0.0
        assert timeline[1].gt_samples > 0

    def test_zero_weight_matches_labeled_only(self, setup):
        """Test w = 0 follows the labeled-only parameter trajectory exactly."""
        with_unlabeled = new_server(setup, w=0.0)
        items = collect(with_unlabeled, setup[1].unlabeled)
        labeled_only = new_server(setup, w=0.0)
        with_unlabeled.train(items, [], epochs=2)
        labeled_only.train([], [], epochs=2)
        assert np.array_equal(with_unlabeled.head.weights, labeled_only.head.weights)
        assert np.array_equal(with_unlabeled.head.bias, labeled_only.head.bias)

    def test_frozen_fingerprint(self, setup):
        """Test feature-level training leaves the backbone bit-identical."""
        server = new_server(setup, policy=Policy.FNOISE)
        before = server.backbone.fingerprint()
        server.train(collect(server, setup[1].unlabeled), [], epochs=1)
        assert server.backbone.fingerprint() == before

    def test_raw_upcycle_trains_backbone(self, setup):
        """Test raw-level upcycling updates the backbone."""
        server = new_server(setup, policy=Policy.RAW_UPCYCLE, freeze_backbone=False)
        before = server.backbone.fingerprint()
        client = make_client(server.cfg, server.backbone, server.head)
        for scene in setup[1].unlabeled:
            server.attach_raw(scene)
            server.receive(client.send(scene))
        server.train(server.drain(), [], epochs=1)
        assert server.backbone.fingerprint() != before

    def test_augment_set_payload(self, setup):
        """Test set augmentation on a grid+set payload keeps the set size."""
        server = new_server(setup, payload_kind=PayloadMode.GRID_SET)
        item = collect(server, setup[1].unlabeled[:1])[0]
        mixed = server.augment_set_payload(item, seed=4)
        assert mixed.n == server.cfg.set_points
