"""Unit tests for voxelization, BEV maps and the backbone."""

import numpy as np
import pytest

from fleetaug.features import (
    Backbone,
    BackboneSpec,
    BevFeature,
    GridSpec,
    SetFeature,
    SparseVoxelGrid,
    bev_compress,
    extract_grid_feature,
    extract_set_feature,
    init_backbone,
    nonzero_cell_count,
    receptive_field,
    voxelize,
)
from tests.conftest import SMALL_BACKBONE, SMALL_GRID


def random_cloud(rng, count, spec=SMALL_GRID):
    return np.column_stack(
        [
            rng.uniform(spec.x_min, spec.x_max, count),
            rng.uniform(spec.y_min, spec.y_max, count),
            rng.uniform(spec.z_min, spec.z_max, count),
            rng.uniform(0.0, 1.0, count),
        ]
    )


class TestGridSpec:
    """Test grid dimensions and cell helpers."""

    def test_default_dims(self):
        """Test the default grid is 8 x 200 x 176."""
        assert GridSpec().dims == (8, 200, 176)

    def test_small_dims(self, grid):
        """Test the test grid dimensions."""
        assert grid.dims == (6, 40, 40)

    def test_invalid_extent(self):
        """Test inverted ranges and non-positive voxels raise ValueError."""
        with pytest.raises(ValueError):
            GridSpec(x_min=1.0, x_max=0.0)
        with pytest.raises(ValueError):
            GridSpec(vz=0.0)

    def test_cell_center_round_trip(self, grid):
        """Test world_to_cell inverts cell_center."""
        x, y = grid.cell_center(7, 12)
        row, col = grid.world_to_cell(x, y)
        assert float(row) == pytest.approx(7.0)
        assert float(col) == pytest.approx(12.0)


class TestVoxelize:
    """Test point voxelization."""

    def test_single_point_offsets(self, grid):
        """Test one point stores its offset from the voxel center and intensity."""
        voxels = voxelize(np.array([[1.0, 0.1, -1.2, 0.5]]), grid)
        cells = voxels.cells()
        assert list(cells) == [(2, 20, 2)]
        assert cells[(2, 20, 2)] == pytest.approx([0.0, -0.1, 0.05, 0.5], abs=1e-6)

    def test_mean_of_points(self, grid):
        """Test points sharing a voxel are averaged."""
        pts = np.array([[1.0, 0.1, -1.2, 0.2], [1.1, 0.1, -1.2, 0.6]])
        value = voxelize(pts, grid).cells()[(2, 20, 2)]
        assert value[0] == pytest.approx(0.05, abs=1e-6)
        assert value[3] == pytest.approx(0.4, abs=1e-6)

    def test_half_open_extent(self, grid):
        """Test points on the upper bound are dropped, lower bound kept."""
        pts = np.array([[grid.x_max, 0.0, -1.0, 1.0], [grid.x_min, 0.0, -1.0, 1.0]])
        cells = voxelize(pts, grid).cells()
        assert len(cells) == 1
        assert next(iter(cells))[2] == 0

    def test_empty_cloud(self, grid):
        """Test an empty cloud gives an empty grid."""
        assert voxelize(np.zeros((0, 4)), grid) == SparseVoxelGrid.empty(grid)

    def test_permutation_invariant(self, grid):
        """Test point order does not change the grid, bit for bit."""
        rng = np.random.default_rng(0)
        pts = random_cloud(rng, 2000)
        # Force many points per voxel
        pts = np.concatenate([pts, pts[:500] + 0.01])
        shuffled = pts[rng.permutation(len(pts))]
        assert voxelize(pts, grid) == voxelize(shuffled, grid)

    def test_values_read_only(self, grid):
        """Test stored arrays cannot be modified in place."""
        voxels = voxelize(random_cloud(np.random.default_rng(1), 10), grid)
        with pytest.raises(ValueError):
            voxels.values[0, 0, 0, 0] = 1.0


class TestBevFeature:
    """Test BEV maps and compression."""

    def test_compress_channel_layout(self, grid):
        """Test channel zi * 4 + c holds channel c of slice zi."""
        voxels = voxelize(np.array([[1.0, 0.1, -1.2, 0.5]]), grid)
        bev = bev_compress(voxels)
        assert bev.channels == grid.depth * 4
        assert bev.values[20, 2, 2 * 4 + 3] == pytest.approx(0.5)
        assert np.count_nonzero(bev.values) == np.count_nonzero(voxels.values)

    def test_compress_preserves_mass(self, grid):
        """Test the sum of all values is unchanged."""
        voxels = voxelize(random_cloud(np.random.default_rng(2), 500), grid)
        bev = bev_compress(voxels)
        assert bev.values.astype(np.float64).sum() == pytest.approx(
            voxels.values.astype(np.float64).sum()
        )

    def test_cells_map_to_occupied_columns(self, grid):
        """Test every stored BEV cell has an occupied voxel column."""
        voxels = voxelize(random_cloud(np.random.default_rng(3), 300), grid)
        bev = bev_compress(voxels)
        assert np.array_equal(bev.occupied(), voxels.occupied().any(axis=0))
        assert nonzero_cell_count(bev) == int(voxels.occupied().any(axis=0).sum())

    def test_negative_zero_is_canonical(self, grid):
        """Test -0.0 values compare equal to an empty map."""
        values = np.zeros((grid.height, grid.width, 2), dtype=np.float32)
        values[3, 3, 0] = -0.0
        assert BevFeature(grid, values) == BevFeature.empty(grid, 2)

    def test_from_cells(self, grid):
        """Test building a map from a sparse mapping."""
        bev = BevFeature.from_cells(grid, 2, {(3, 4): [1.0, 1.0]})
        assert nonzero_cell_count(bev) == 1
        assert bev.cells()[(3, 4)].tolist() == [1.0, 1.0]
        with pytest.raises(ValueError):
            BevFeature.from_cells(grid, 2, {(grid.height, 0): [1.0, 1.0]})
        with pytest.raises(ValueError):
            BevFeature.from_cells(grid, 2, {(0, 0): [1.0]})

    def test_shape_checked(self, grid):
        """Test values must match the grid."""
        with pytest.raises(ValueError):
            BevFeature(grid, np.zeros((3, 3, 2)))


class TestBackboneSpec:
    """Test backbone layout validation."""

    def test_default_bev_channels(self):
        """Test the default backbone gives 32 channels on the default grid."""
        assert BackboneSpec().bev_channels(GridSpec()) == 32

    def test_small_bev_channels(self, grid):
        """Test the test backbone channel count."""
        assert SMALL_BACKBONE.bev_channels(grid) == 16

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"channels": (4,)},
            {"kernel": 2},
            {"strides": ((1, 1, 1),)},
            {"strides": ((1, 2, 1),) * 5},
        ],
    )
    def test_invalid(self, kwargs):
        """Test malformed layouts raise ValueError."""
        with pytest.raises(ValueError):
            BackboneSpec(**kwargs)

    def test_receptive_field(self):
        """Test the per-axis reach of the test backbone."""
        assert receptive_field(SMALL_BACKBONE) == (3, 2, 2)


class TestBackbone:
    """Test grid-type feature extraction."""

    def test_seeded_init(self):
        """Test equal seeds give equal weights."""
        assert init_backbone(SMALL_BACKBONE).fingerprint() == init_backbone(SMALL_BACKBONE).fingerprint()
        other = BackboneSpec(SMALL_BACKBONE.channels, strides=SMALL_BACKBONE.strides, seed=4)
        assert init_backbone(other).fingerprint() != init_backbone(SMALL_BACKBONE).fingerprint()

    def test_zero_in_zero_out(self, backbone, grid):
        """Test an empty grid gives an all-zero feature."""
        feature = extract_grid_feature(backbone, SparseVoxelGrid.empty(grid))
        assert feature.channels == 16
        assert nonzero_cell_count(feature) == 0

    def test_channel_mismatch(self, backbone, grid):
        """Test a grid with the wrong channel count is rejected."""
        with pytest.raises(ValueError):
            extract_grid_feature(backbone, SparseVoxelGrid.empty(grid, channels=3))

    def test_locality(self, backbone, grid):
        """Test one point only reaches cells within the receptive field."""
        feature = extract_grid_feature(backbone, voxelize(np.array([[6.2, 0.2, -1.2, 0.9]]), grid))
        _, reach_y, reach_x = receptive_field(SMALL_BACKBONE)
        rows, cols = np.nonzero(feature.occupied())
        assert np.all(np.abs(rows - 20) <= reach_y)
        assert np.all(np.abs(cols - 15) <= reach_x)

    def test_deterministic(self, backbone, grid):
        """Test repeated extraction is bit-identical."""
        voxels = voxelize(random_cloud(np.random.default_rng(4), 400), grid)
        assert extract_grid_feature(backbone, voxels) == extract_grid_feature(backbone, voxels)

    def test_cache_matches_plain_forward(self, backbone, grid):
        """Test forward_with_cache returns the same feature."""
        voxels = voxelize(random_cloud(np.random.default_rng(5), 400), grid)
        feature, _ = backbone.forward_with_cache(voxels)
        assert feature == extract_grid_feature(backbone, voxels)

    def test_frozen_rejects_updates(self, backbone):
        """Test a frozen backbone cannot be trained."""
        grads = [np.zeros(w.shape) for w in backbone.weights]
        with pytest.raises(ValueError):
            backbone.apply_gradients(grads, 0.1)

    def test_state_round_trip(self, backbone):
        """Test state_dict / from_state preserve weights and layout."""
        restored = Backbone.from_state(backbone.state_dict())
        assert restored.fingerprint() == backbone.fingerprint()
        assert restored.spec == backbone.spec
        assert restored.frozen

    def test_copy_is_independent(self):
        """Test training a copy leaves the original untouched."""
        bb = init_backbone(SMALL_BACKBONE)
        before = bb.fingerprint()
        clone = bb.copy()
        clone.apply_gradients([np.ones(w.shape) for w in clone.weights], 0.1)
        assert bb.fingerprint() == before
        assert clone.fingerprint() != before

    def test_backward_directional_derivative(self, grid):
        """Test backward agrees with a central finite difference along a random direction."""
        rng = np.random.default_rng(6)
        bb = init_backbone(SMALL_BACKBONE)
        voxels = voxelize(random_cloud(rng, 300), grid)
        feature, cache = bb.forward_with_cache(voxels)
        probe = rng.normal(size=feature.values.shape)
        grads = bb.backward(cache, probe)

        direction = [rng.normal(size=w.shape) for w in bb.weights]
        eps = 1e-3

        def loss(sign):
            weights = [(w.astype(np.float64) + sign * eps * d).astype(np.float32) for w, d in zip(bb.weights, direction)]
            moved = Backbone(bb.spec, weights)
            value = float(np.sum(extract_grid_feature(moved, voxels).values.astype(np.float64) * probe))
            return value, weights

        plus, w_plus = loss(1.0)
        minus, w_minus = loss(-1.0)
        numeric = plus - minus
        analytic = sum(
            float(np.sum(g * (a.astype(np.float64) - b.astype(np.float64))))
            for g, a, b in zip(grads, w_plus, w_minus)
        )
        assert numeric == pytest.approx(analytic, rel=1e-2)


class TestSetFeature:
    """Test set-type feature extraction."""

    def test_reads_cell_values_at_centers(self, backbone, grid):
        """Test keypoints at cell centers read the exact cell vector."""
        rng = np.random.default_rng(7)
        bev = extract_grid_feature(backbone, voxelize(random_cloud(rng, 500), grid))
        rows = np.array([5, 10, 30])
        cols = np.array([7, 20, 33])
        xs, ys = zip(*(grid.cell_center(r, c) for r, c in zip(rows, cols)))
        pts = np.column_stack([xs, ys, np.full(3, -1.0), np.zeros(3)])
        feature = extract_set_feature(backbone, pts, bev, 3, seed=0)
        for position, vector in zip(feature.positions, feature.vectors):
            row, col = (int(round(float(v))) for v in grid.world_to_cell(position[0], position[1]))
            assert vector == pytest.approx(bev.values[row, col], abs=1e-5)

    def test_cyclic_repeat(self, backbone, grid):
        """Test fewer points than n repeat cyclically."""
        bev = BevFeature.empty(grid, 16)
        pts = np.array([[1.0, 0.0, -1.0, 0.0], [5.0, 2.0, -1.0, 0.0], [9.0, -3.0, -1.0, 0.0]])
        feature = extract_set_feature(backbone, pts, bev, 7, seed=1)
        assert feature.n == 7
        assert feature.d == 16
        assert np.array_equal(feature.positions[:4], feature.positions[3:7])

    def test_deterministic(self, backbone, grid):
        """Test equal seeds give equal set features."""
        rng = np.random.default_rng(8)
        pts = random_cloud(rng, 200)
        bev = extract_grid_feature(backbone, voxelize(pts, grid))
        assert extract_set_feature(backbone, pts, bev, 32, 5) == extract_set_feature(backbone, pts, bev, 32, 5)

    def test_rejects_bad_input(self, backbone, grid):
        """Test empty clouds, n < 1 and wrong channel counts raise ValueError."""
        bev = BevFeature.empty(grid, 16)
        with pytest.raises(ValueError):
            extract_set_feature(backbone, np.zeros((0, 4)), bev, 4, 0)
        with pytest.raises(ValueError):
            extract_set_feature(backbone, np.ones((3, 4)), bev, 0, 0)
        with pytest.raises(ValueError):
            extract_set_feature(backbone, np.ones((3, 4)), BevFeature.empty(grid, 5), 4, 0)

    def test_shape_validation(self):
        """Test mismatched positions and vectors are rejected."""
        with pytest.raises(ValueError):
            SetFeature(np.zeros((3, 2)), np.zeros((3, 4)))
        with pytest.raises(ValueError):
            SetFeature(np.zeros((3, 3)), np.zeros((2, 4)))
