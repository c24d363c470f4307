"""Deterministic sparse 3D convolution backbone and keypoint features."""

import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from fleetaug.features.voxelgrid import BevFeature, GridSpec, SparseVoxelGrid, VOXEL_CHANNELS
from fleetaug.geometry.boxes import PointsLike, points_array

logger = logging.getLogger(__name__)

Stride = Tuple[int, int, int]


@dataclass(frozen=True)
class BackboneSpec:
    """
    Layer layout of the backbone.

    ``channels`` lists the input channel count followed by each layer's
    output channels, so there are ``len(channels) - 1`` layers. Strides are
    (z, y, x) per layer; only z may be strided so the BEV map keeps the
    voxel grid's resolution.
    """

    channels: Tuple[int, ...] = (VOXEL_CHANNELS, 8, 16, 16, 16, 16)
    kernel: int = 3
    strides: Tuple[Stride, ...] = ((1, 1, 1), (2, 1, 1), (1, 1, 1), (2, 1, 1), (1, 1, 1))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(tuple(int(v) for v in s) for s in self.strides))
        if len(self.channels) < 2:
            raise ValueError("BackboneSpec needs at least one layer")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel counts must be positive, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd width, got {self.kernel}")
        if len(self.strides) != self.num_layers:
            raise ValueError(
                f"expected {self.num_layers} strides, got {len(self.strides)}"
            )
        for stride in self.strides:
            if len(stride) != 3 or min(stride) < 1:
                raise ValueError(f"strides must be three factors >= 1, got {stride}")
            if stride[1] != 1 or stride[2] != 1:
                raise ValueError(f"only z may be strided, got {stride}")

    @property
    def num_layers(self) -> int:
        return len(self.channels) - 1

    @property
    def input_channels(self) -> int:
        return self.channels[0]

    def output_depth(self, depth: int) -> int:
        for sz, _, _ in self.strides:
            depth = int(math.ceil(depth / sz))
        return depth

    def bev_channels(self, grid: GridSpec) -> int:
        """Channel count of the BEV feature produced for ``grid``."""
        return self.output_depth(grid.depth) * self.channels[-1]


def glorot_limit(spec: BackboneSpec, layer: int) -> float:
    """Half-width a = sqrt(6 / (fan_in + fan_out)) of the uniform weight init."""
    taps = spec.kernel**3
    fan_in = taps * spec.channels[layer]
    fan_out = taps * spec.channels[layer + 1]
    return math.sqrt(6.0 / (fan_in + fan_out))


def receptive_field(spec: BackboneSpec) -> Stride:
    """Radius, in input voxels per (z, y, x) axis, that one output cell can see."""
    radius = spec.kernel // 2
    reach = [0, 0, 0]
    scale = [1, 1, 1]
    for stride in spec.strides:
        for axis in range(3):
            reach[axis] += radius * scale[axis]
            scale[axis] *= stride[axis]
    return tuple(reach)


@dataclass
class _LayerCache:
    inputs: np.ndarray
    coords: Tuple[np.ndarray, np.ndarray, np.ndarray]
    pre_activation: np.ndarray
    taps: List[Tuple[Tuple[int, int, int], np.ndarray, Tuple[np.ndarray, ...]]]


@dataclass
class ForwardCache:
    """Intermediate values kept by :meth:`Backbone.forward_with_cache`."""

    layers: List[_LayerCache] = field(default_factory=list)
    final_shape: Tuple[int, int, int, int] = (0, 0, 0, 0)


class Backbone:
    """Stack of regular sparse 3D convolutions with ReLU."""

    def __init__(self, spec: BackboneSpec, weights: Sequence[np.ndarray], frozen: bool = False):
        k = spec.kernel
        if len(weights) != spec.num_layers:
            raise ValueError(f"expected {spec.num_layers} weight tensors, got {len(weights)}")
        checked = []
        for layer, weight in enumerate(weights):
            expected = (k, k, k, spec.channels[layer], spec.channels[layer + 1])
            weight = np.array(weight, dtype=np.float32)
            if weight.shape != expected:
                raise ValueError(f"layer {layer} weight shape {weight.shape} != {expected}")
            if not np.all(np.isfinite(weight)):
                raise ValueError(f"layer {layer} weights must be finite")
            checked.append(weight)
        self.spec = spec
        self.weights: List[np.ndarray] = checked
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True

    def fingerprint(self) -> str:
        """Digest of the weight bytes; identical weights give identical digests."""
        digest = hashlib.sha256()
        for weight in self.weights:
            digest.update(weight.tobytes())
        return digest.hexdigest()

    def copy(self) -> "Backbone":
        return Backbone(self.spec, [w.copy() for w in self.weights], self.frozen)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"backbone.layer{i}": w for i, w in enumerate(self.weights)}
        state["backbone.channels"] = np.array(self.spec.channels, dtype=np.int64)
        state["backbone.strides"] = np.array(self.spec.strides, dtype=np.int64)
        state["backbone.kernel"] = np.array(self.spec.kernel, dtype=np.int64)
        state["backbone.seed"] = np.array(self.spec.seed, dtype=np.int64)
        return state

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray], frozen: bool = True) -> "Backbone":
        spec = BackboneSpec(
            channels=tuple(int(c) for c in state["backbone.channels"]),
            kernel=int(state["backbone.kernel"]),
            strides=tuple(tuple(int(v) for v in s) for s in state["backbone.strides"]),
            seed=int(state["backbone.seed"]),
        )
        weights = [state[f"backbone.layer{i}"] for i in range(spec.num_layers)]
        return cls(spec, weights, frozen=frozen)

    def forward_with_cache(self, grid: SparseVoxelGrid) -> Tuple[BevFeature, ForwardCache]:
        """Run the stack and keep what :meth:`backward` needs."""
        return self._forward(grid, keep_cache=True)

    def _forward(
        self, grid: SparseVoxelGrid, keep_cache: bool
    ) -> Tuple[BevFeature, Optional[ForwardCache]]:
        if grid.channels != self.spec.input_channels:
            raise ValueError(
                f"grid has {grid.channels} channels, backbone expects "
                f"{self.spec.input_channels}"
            )
        cache = ForwardCache() if keep_cache else None
        volume = np.asarray(grid.values, dtype=np.float32)
        for layer, weight in enumerate(self.weights):
            volume, layer_cache = _sparse_conv(
                volume, weight, self.spec.strides[layer], self.spec.kernel, keep_cache
            )
            if cache is not None:
                cache.layers.append(layer_cache)
        depth, height, width, channels = volume.shape
        if cache is not None:
            cache.final_shape = volume.shape
        stacked = np.transpose(volume, (1, 2, 0, 3)).reshape(height, width, depth * channels)
        return BevFeature(grid.spec, stacked), cache

    def backward(self, cache: ForwardCache, d_bev: np.ndarray) -> List[np.ndarray]:
        """
        Gradients of a scalar loss with respect to every layer's weights.

        Args:
            cache: Cache from :meth:`forward_with_cache`
            d_bev: Loss gradient with respect to the BEV values, shape (H, W, C)

        Returns:
            One float64 gradient per weight tensor
        """
        depth, height, width, channels = cache.final_shape
        grad = (
            np.asarray(d_bev, dtype=np.float64)
            .reshape(height, width, depth, channels)
            .transpose(2, 0, 1, 3)
        )
        grads: List[np.ndarray] = [np.zeros(w.shape, dtype=np.float64) for w in self.weights]
        for layer in reversed(range(len(self.weights))):
            entry = cache.layers[layer]
            weight = self.weights[layer].astype(np.float64)
            g_out = grad[entry.coords] * (entry.pre_activation > 0)
            d_inputs = np.zeros(entry.inputs.shape, dtype=np.float64) if layer > 0 else None
            for tap, rows, index in entry.taps:
                gathered = entry.inputs[index].astype(np.float64)
                grads[layer][tap] += gathered.T @ g_out[rows]
                if d_inputs is not None:
                    # One tap maps distinct outputs to distinct inputs.
                    d_inputs[index] += g_out[rows] @ weight[tap].T
            grad = d_inputs
        return grads

    def apply_gradients(self, grads: Sequence[np.ndarray], lr: float) -> None:
        """Single SGD update in place."""
        if self.frozen:
            raise ValueError("cannot update a frozen backbone")
        self.weights = [
            (w.astype(np.float64) - lr * g).astype(np.float32) for w, g in zip(self.weights, grads)
        ]


def _sparse_conv(
    volume: np.ndarray, weight: np.ndarray, stride: Stride, kernel: int, keep_cache: bool
) -> Tuple[np.ndarray, Optional[_LayerCache]]:
    """One regular sparse convolution followed by ReLU."""
    depth, height, width, _ = volume.shape
    out_channels = weight.shape[-1]
    sz, sy, sx = stride
    radius = kernel // 2
    out_dims = (
        int(math.ceil(depth / sz)),
        int(math.ceil(height / sy)),
        int(math.ceil(width / sx)),
    )
    active = np.any(volume != 0, axis=-1)
    output = np.zeros(out_dims + (out_channels,), dtype=np.float32)
    if not active.any():
        empty = (np.zeros(0, np.int64),) * 3
        cache = _LayerCache(volume, empty, np.zeros((0, out_channels), np.float32), [])
        return output, cache if keep_cache else None

    reach = ndimage.binary_dilation(active, structure=np.ones((kernel,) * 3, dtype=bool))
    out_active = reach[::sz, ::sy, ::sx]
    coords = np.nonzero(out_active)
    accum = np.zeros((coords[0].size, out_channels), dtype=np.float32)
    taps = []
    for tz, ty, tx in itertools.product(range(kernel), repeat=3):
        iz = coords[0] * sz + tz - radius
        iy = coords[1] * sy + ty - radius
        ix = coords[2] * sx + tx - radius
        valid = (iz >= 0) & (iz < depth) & (iy >= 0) & (iy < height) & (ix >= 0) & (ix < width)
        rows = np.flatnonzero(valid)
        iz, iy, ix = iz[rows], iy[rows], ix[rows]
        hit = active[iz, iy, ix]
        rows, iz, iy, ix = rows[hit], iz[hit], iy[hit], ix[hit]
        if rows.size == 0:
            continue
        accum[rows] += volume[iz, iy, ix] @ weight[tz, ty, tx]
        if keep_cache:
            taps.append(((tz, ty, tx), rows, (iz, iy, ix)))
    output[coords] = np.maximum(accum, 0.0)
    if not keep_cache:
        return output, None
    return output, _LayerCache(volume, coords, accum, taps)


def init_backbone(spec: BackboneSpec) -> Backbone:
    """Seeded Glorot-uniform weights; the result is not frozen."""
    rng = np.random.default_rng(spec.seed)
    k = spec.kernel
    weights = []
    for layer in range(spec.num_layers):
        limit = glorot_limit(spec, layer)
        shape = (k, k, k, spec.channels[layer], spec.channels[layer + 1])
        weights.append(rng.uniform(-limit, limit, size=shape).astype(np.float32))
    return Backbone(spec, weights, frozen=False)


def extract_grid_feature(bb: Backbone, grid: SparseVoxelGrid) -> BevFeature:
    """Grid-type feature: sparse convolutions then BEV compression."""
    feature, _ = bb._forward(grid, keep_cache=False)
    return feature


class SetFeature:
    """Keypoint positions (n, 3) with one d-dimensional vector each."""

    def __init__(self, positions: np.ndarray, vectors: np.ndarray):
        positions = np.ascontiguousarray(positions, dtype=np.float32) + np.float32(0.0)
        vectors = np.ascontiguousarray(vectors, dtype=np.float32) + np.float32(0.0)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError(f"positions must have shape (n, 3), got {positions.shape}")
        if vectors.ndim != 2 or vectors.shape[0] != positions.shape[0]:
            raise ValueError(
                f"vectors must have shape ({positions.shape[0]}, d), got {vectors.shape}"
            )
        positions.setflags(write=False)
        vectors.setflags(write=False)
        self.positions = positions
        self.vectors = vectors

    @property
    def n(self) -> int:
        return int(self.positions.shape[0])

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SetFeature):
            return NotImplemented
        return (
            self.positions.shape == other.positions.shape
            and self.vectors.shape == other.vectors.shape
            and np.array_equal(self.positions.view(np.uint32), other.positions.view(np.uint32))
            and np.array_equal(self.vectors.view(np.uint32), other.vectors.view(np.uint32))
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"SetFeature(n={self.n}, d={self.d})"


def farthest_point_sampling(xyz: np.ndarray, count: int, start: int) -> np.ndarray:
    """
    Indices of ``count`` points chosen by farthest-point sampling.

    Args:
        xyz: (N, 3) positions
        count: Number of samples, at most N
        start: Index of the first sample

    Returns:
        (count,) index array
    """
    n = xyz.shape[0]
    selected = np.empty(count, dtype=np.int64)
    distances = np.full(n, np.inf)
    current = int(start)
    for i in range(count):
        selected[i] = current
        delta = xyz - xyz[current]
        distances = np.minimum(distances, np.einsum("ij,ij->i", delta, delta))
        current = int(np.argmax(distances))
    return selected


def sample_bev(feature: BevFeature, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear read of the BEV map at world (x, y); cells outside read as zero."""
    rows, cols = feature.spec.world_to_cell(x, y)
    coordinates = np.stack([rows, cols])
    values = feature.values.astype(np.float64)
    out = np.empty((rows.size, feature.channels), dtype=np.float64)
    for channel in range(feature.channels):
        out[:, channel] = ndimage.map_coordinates(
            values[:, :, channel], coordinates, order=1, mode="grid-constant", cval=0.0
        )
    return out


def extract_set_feature(
    bb: Backbone, points: PointsLike, bev: BevFeature, n: int, seed: int
) -> SetFeature:
    """
    Set-type feature: FPS keypoints with vectors read off the BEV map.

    Raw points outside the grid extent are ignored. When fewer than ``n``
    points remain, the sampled keypoints repeat cyclically.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    expected = bb.spec.bev_channels(bev.spec)
    if bev.channels != expected:
        raise ValueError(f"BEV has {bev.channels} channels, backbone produces {expected}")
    pts = points_array(points)
    spec = bev.spec
    inside = spec.contains_xy(pts[:, 0], pts[:, 1]) & (pts[:, 2] >= spec.z_min) & (
        pts[:, 2] < spec.z_max
    )
    xyz = pts[inside, :3]
    if xyz.shape[0] == 0:
        raise ValueError("cannot extract a set feature from an empty cloud")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(xyz.shape[0]))
    picked = farthest_point_sampling(xyz, min(n, xyz.shape[0]), start)
    indices = picked[np.arange(n) % picked.size]
    keypoints = xyz[indices]
    vectors = sample_bev(bev, keypoints[:, 0], keypoints[:, 1])
    return SetFeature(keypoints, vectors)
