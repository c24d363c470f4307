"""Unit tests for oriented boxes, rotated IoU and NMS."""

import math

import numpy as np
import pytest

from fleetaug.geometry import (
    Box3D,
    Detection,
    Point3,
    box_corners_bev,
    boxes_array,
    clip_polygon,
    iou_3d,
    iou_3d_matrix,
    iou_bev,
    iou_bev_matrix,
    nms_bev,
    normalize_yaw,
    points_array,
    points_in_box,
    polygon_area,
    rotate_points_z,
)


def random_boxes(rng, count):
    boxes = []
    for _ in range(count):
        boxes.append(
            Box3D(
                rng.uniform(-3, 3),
                rng.uniform(-3, 3),
                rng.uniform(-0.5, 0.5),
                rng.uniform(0.5, 4.5),
                rng.uniform(0.5, 2.5),
                rng.uniform(0.5, 2.0),
                rng.uniform(-math.pi, math.pi),
            )
        )
    return boxes


def monte_carlo_iou_bev(a, b, samples, rng):
    corners = np.concatenate([box_corners_bev(a), box_corners_bev(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    xy = rng.uniform(lo, hi, size=(samples, 2))
    pts = np.concatenate([xy, np.zeros((samples, 2))], axis=1)
    flat_a = Box3D(a.cx, a.cy, 0.0, a.length, a.width, 1.0, a.yaw)
    flat_b = Box3D(b.cx, b.cy, 0.0, b.length, b.width, 1.0, b.yaw)
    in_a = points_in_box(pts, flat_a)
    in_b = points_in_box(pts, flat_b)
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


class TestBox3D:
    """Test Box3D construction and transforms."""

    def test_yaw_normalized(self):
        """Test yaw is wrapped onto (-pi, pi]."""
        assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi).yaw == pytest.approx(math.pi)
        assert Box3D(0, 0, 0, 1, 1, 1, -math.pi).yaw == math.pi
        assert normalize_yaw(-math.pi) == math.pi

    def test_full_turn_wraps(self):
        """Test a yaw one full turn ahead wraps back."""
        turned = Box3D(1, 2, 3, 4, 2, 1, 0.25 + 2 * math.pi)
        assert turned.yaw == pytest.approx(0.25)

    @pytest.mark.parametrize("dims", [(0, 1, 1), (1, -1, 1), (1, 1, 0)])
    def test_non_positive_dims_rejected(self, dims):
        """Test non-positive dimensions raise ValueError."""
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, *dims)

    def test_non_finite_rejected(self):
        """Test NaN and inf fields raise ValueError."""
        with pytest.raises(ValueError):
            Box3D(float("nan"), 0, 0, 1, 1, 1)
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 1, 1, 1, float("inf"))

    def test_array_round_trip(self):
        """Test to_array / from_array preserve the box."""
        box = Box3D(1.5, -2.0, 0.3, 3.9, 1.6, 1.56, 0.7, class_id=2)
        assert Box3D.from_array(box.to_array(), class_id=2) == box
        with pytest.raises(ValueError):
            Box3D.from_array([1, 2, 3])

    def test_mirror_is_involution(self):
        """Test mirroring twice returns the original box."""
        box = Box3D(1.0, 2.0, 0.0, 4.0, 2.0, 1.5, 0.4)
        assert box.mirrored_y().mirrored_y() == box
        assert box.mirrored_y().cy == -2.0
        assert box.mirrored_y().yaw == pytest.approx(-0.4)

    def test_rotation_moves_center(self):
        """Test rotating about the origin by 90 degrees."""
        box = Box3D(1.0, 0.0, 0.0, 4.0, 2.0, 1.0, 0.0).rotated(math.pi / 2)
        assert box.cx == pytest.approx(0.0, abs=1e-12)
        assert box.cy == pytest.approx(1.0)
        assert box.yaw == pytest.approx(math.pi / 2)

    def test_boxes_array_shape(self):
        """Test stacking boxes into an (N, 7) array."""
        assert boxes_array([]).shape == (0, 7)
        assert boxes_array([Box3D(0, 0, 0, 1, 1, 1)] * 3).shape == (3, 7)


class TestDetection:
    """Test Detection validation."""

    def test_confidences_in_unit_interval(self):
        """Test confidences outside [0, 1] raise ValueError."""
        box = Box3D(0, 0, 0, 1, 1, 1)
        Detection(box, 0.0, 1.0)
        with pytest.raises(ValueError):
            Detection(box, 1.5, 0.5)
        with pytest.raises(ValueError):
            Detection(box, 0.5, -0.1)


class TestPoints:
    """Test point adapters and the inside-box predicate."""

    def test_points_array_from_point3(self):
        """Test Point3 lists become (N, 4) arrays."""
        arr = points_array([Point3(1, 2, 3, 0.5), Point3(4, 5, 6)])
        assert arr.shape == (2, 4)
        assert arr[1, 3] == 0.0

    def test_points_array_pads_intensity(self):
        """Test a 3-column array gets a zero intensity column."""
        arr = points_array(np.ones((5, 3)))
        assert arr.shape == (5, 4)
        assert np.all(arr[:, 3] == 0.0)

    def test_points_array_empty(self):
        """Test an empty cloud gives shape (0, 4)."""
        assert points_array([]).shape == (0, 4)

    def test_points_array_rejects_bad_input(self):
        """Test wrong shapes and non-finite values are rejected."""
        with pytest.raises(ValueError):
            points_array(np.ones((3, 5)))
        with pytest.raises(ValueError):
            points_array([[0.0, float("nan"), 0.0]])

    def test_boundary_inclusive(self):
        """Test points on the box surface count as inside."""
        box = Box3D(0, 0, 0, 2, 2, 2)
        pts = np.array([[1, 0, 0, 0], [1.0001, 0, 0, 0], [0, -1, 1, 0]])
        assert points_in_box(pts, box).tolist() == [True, False, True]

    def test_rotated_box(self):
        """Test the predicate follows the box yaw."""
        box = Box3D(0, 0, 0, 4, 1, 1, math.pi / 2)
        pts = np.array([[0, 1.8, 0, 0], [1.8, 0, 0, 0]])
        assert points_in_box(pts, box).tolist() == [True, False]

    def test_rigid_invariance(self):
        """Test moving points and box together keeps the mask."""
        rng = np.random.default_rng(3)
        pts = np.concatenate([rng.uniform(-3, 3, (200, 3)), np.zeros((200, 1))], axis=1)
        box = Box3D(0.5, -0.2, 0.0, 3.0, 1.5, 2.0, 0.3)
        angle, center = 1.1, (2.0, -1.0)
        moved = rotate_points_z(pts, angle, center)
        assert np.array_equal(points_in_box(pts, box), points_in_box(moved, box.rotated(angle, center)))


class TestPolygons:
    """Test polygon clipping and area."""

    def test_square_area(self):
        """Test the shoelace area of a unit square."""
        assert polygon_area([(0, 0), (1, 0), (1, 1), (0, 1)]) == pytest.approx(1.0)

    def test_degenerate_area_zero(self):
        """Test fewer than three vertices have zero area."""
        assert polygon_area([(0, 0), (1, 1)]) == 0.0

    def test_clip_disjoint(self):
        """Test clipping disjoint polygons gives no area."""
        square = [(0, 0), (1, 0), (1, 1), (0, 1)]
        far = [(5, 5), (6, 5), (6, 6), (5, 6)]
        assert polygon_area(clip_polygon(square, far)) == 0.0

    def test_corners_ccw(self):
        """Test corners start at (+l/2, +w/2) and run counter-clockwise."""
        corners = box_corners_bev(Box3D(0, 0, 0, 4, 2, 1))
        assert corners[0] == pytest.approx([2, 1])
        assert corners[1] == pytest.approx([-2, 1])
        signed = sum(
            corners[i][0] * corners[(i + 1) % 4][1] - corners[(i + 1) % 4][0] * corners[i][1]
            for i in range(4)
        )
        assert signed > 0


class TestIoU:
    """Test BEV and 3D IoU."""

    def test_identical_boxes(self):
        """Test identical boxes have IoU 1."""
        box = Box3D(1, 2, 0, 3.9, 1.6, 1.56, 0.8)
        assert iou_bev(box, box) == pytest.approx(1.0)
        assert iou_3d(box, box) == pytest.approx(1.0)

    def test_shifted_boxes(self):
        """Test axis-aligned boxes shifted by one meter."""
        a = Box3D(0, 0, 0, 4, 2, 2)
        b = Box3D(1, 0, 0, 4, 2, 2)
        assert iou_bev(a, b) == pytest.approx(0.6)

    def test_crossed_boxes(self):
        """Test a box against its 90 degree rotation."""
        a = Box3D(0, 0, 0, 4, 2, 1)
        b = Box3D(0, 0, 0, 4, 2, 1, math.pi / 2)
        assert iou_bev(a, b) == pytest.approx(1.0 / 3.0)

    def test_half_z_overlap(self):
        """Test 3D IoU with identical footprints and half height overlap."""
        a = Box3D(0, 0, 0, 4, 2, 2)
        b = Box3D(0, 0, 1, 4, 2, 2)
        assert iou_3d(a, b) == pytest.approx(1.0 / 3.0)
        assert iou_bev(a, b) == pytest.approx(1.0)

    def test_disjoint(self):
        """Test separated boxes have IoU 0."""
        a = Box3D(0, 0, 0, 4, 2, 2)
        b = Box3D(10, 0, 0, 4, 2, 2)
        assert iou_bev(a, b) == 0.0
        assert iou_3d(a, b) == 0.0
        assert iou_3d(a, Box3D(0, 0, 5, 4, 2, 2)) == 0.0

    def test_symmetric_and_bounded(self):
        """Test IoU is symmetric and within [0, 1] on random pairs."""
        rng = np.random.default_rng(0)
        boxes = random_boxes(rng, 40)
        for a, b in zip(boxes[::2], boxes[1::2]):
            assert iou_bev(a, b) == pytest.approx(iou_bev(b, a), abs=1e-12)
            assert iou_3d(a, b) == pytest.approx(iou_3d(b, a), abs=1e-12)
            assert 0.0 <= iou_bev(a, b) <= 1.0
            assert 0.0 <= iou_3d(a, b) <= 1.0

    def test_matrix_matches_scalar(self):
        """Test the vectorized matrices agree with the polygon clip."""
        rng = np.random.default_rng(1)
        a = random_boxes(rng, 12)
        b = random_boxes(rng, 9)
        bev = iou_bev_matrix(boxes_array(a), boxes_array(b))
        vol = iou_3d_matrix(boxes_array(a), boxes_array(b))
        for i, box_a in enumerate(a):
            for j, box_b in enumerate(b):
                assert bev[i, j] == pytest.approx(iou_bev(box_a, box_b), abs=1e-9)
                assert vol[i, j] == pytest.approx(iou_3d(box_a, box_b), abs=1e-9)

    def test_matrix_empty(self):
        """Test empty inputs give empty matrices."""
        assert iou_bev_matrix(np.zeros((0, 7)), np.zeros((3, 7))).shape == (0, 3)

    @pytest.mark.slow
    def test_monte_carlo_agreement(self):
        """Test exact BEV IoU against a Monte-Carlo estimate."""
        rng = np.random.default_rng(7)
        boxes = random_boxes(rng, 200)
        for a, b in zip(boxes[::2], boxes[1::2]):
            estimate = monte_carlo_iou_bev(a, b, 1_000_000, rng)
            assert abs(iou_bev(a, b) - estimate) <= 0.005


class TestNms:
    """Test greedy rotated NMS."""

    def make(self, cx, score):
        return Detection(Box3D(cx, 0, 0, 4, 2, 1.5), score, 0.5)

    def test_suppresses_overlap(self):
        """Test the lower-scored overlapping detection is removed."""
        dets = [self.make(0.0, 0.6), self.make(0.2, 0.9), self.make(10.0, 0.5)]
        kept = nms_bev(dets, 0.1)
        assert [d.cls_conf for d in kept] == [0.9, 0.5]

    def test_threshold(self):
        """Test suppression only above the threshold."""
        dets = [self.make(0.0, 0.9), self.make(1.0, 0.8)]
        assert len(nms_bev(dets, 0.61)) == 2
        assert len(nms_bev(dets, 0.59)) == 1

    def test_ties_keep_lower_index(self):
        """Test equal scores keep the earlier detection."""
        first, second = self.make(0.0, 0.7), self.make(0.1, 0.7)
        assert nms_bev([first, second], 0.1) == [first]

    def test_order_independent(self):
        """Test distinct scores give the same result for any input order."""
        rng = np.random.default_rng(5)
        dets = [self.make(float(x), float(s)) for x, s in zip(rng.uniform(0, 12, 15), rng.permutation(15) / 15)]
        reference = nms_bev(dets, 0.2)
        for _ in range(5):
            shuffled = [dets[i] for i in rng.permutation(len(dets))]
            assert nms_bev(shuffled, 0.2) == reference
        scores = [d.cls_conf for d in reference]
        assert scores == sorted(scores, reverse=True)

    def test_caps(self):
        """Test pre- and post-NMS caps."""
        dets = [self.make(5.0 * i, 0.9 - 0.1 * i) for i in range(5)]
        assert len(nms_bev(dets, 0.1, post_max_size=2)) == 2
        assert len(nms_bev(dets, 0.1, pre_max_size=3)) == 3

    def test_invalid_threshold(self):
        """Test thresholds outside [0, 1] raise ValueError."""
        with pytest.raises(ValueError):
            nms_bev([], 1.5)
