"""Feature-level GT sampling for grid-type and set-type features."""

from typing import Sequence

import numpy as np

from fleetaug.features.backbone import SetFeature
from fleetaug.features.voxelgrid import BevFeature
from fleetaug.geometry.boxes import Box3D, points_in_box


def f_gt_grid(scene: BevFeature, gt: BevFeature) -> BevFeature:
    """
    Overwrite scene cells with every cell the GT-only feature stores.

    All channels of a stored GT cell replace the scene cell; other cells keep
    the scene value. No blending.
    """
    if scene.spec != gt.spec or scene.values.shape != gt.values.shape:
        raise ValueError(
            f"feature shapes differ: scene {scene.values.shape} vs gt {gt.values.shape}"
        )
    stored = gt.occupied()
    return BevFeature(scene.spec, np.where(stored[..., None], gt.values, scene.values))


def scene_share(scene_nz: int, gt_nz: int, multiplier: float = 1.0) -> float:
    """Probability that one set-feature draw comes from the scene side."""
    weighted = multiplier * scene_nz
    return weighted / (weighted + gt_nz)


def f_gt_set(
    scene: SetFeature,
    gt: SetFeature,
    gt_boxes: Sequence[Box3D],
    scene_nz: int,
    gt_nz: int,
    n: int,
    seed: int,
    ratio_multiplier: float = 1.0,
) -> SetFeature:
    """
    Mix scene and GT keypoints into an n-point set.

    Scene keypoints lying inside any GT box are excluded first. Each of the
    ``n`` draws (with replacement) picks the scene side with probability
    ``scene_nz / (scene_nz + gt_nz)``, scaled by ``ratio_multiplier`` on the
    scene count, otherwise the GT side, then a uniform member of that side.

    Args:
        scene: Set feature of the unlabeled scene
        gt: Set feature of the GT-only cloud
        gt_boxes: Placed GT boxes
        scene_nz: Stored cell count of the scene grid feature
        gt_nz: Stored cell count of the GT-only grid feature
        n: Output size
        seed: Random seed
        ratio_multiplier: Extra weight on the scene count

    Returns:
        Mixed set feature of size ``n``
    """
    if scene_nz <= 0 or gt_nz <= 0:
        raise ValueError(f"non-zero counts must be positive, got ({scene_nz}, {gt_nz})")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if scene.n and gt.n and scene.d != gt.d:
        raise ValueError(f"feature dims differ: {scene.d} vs {gt.d}")

    positions = scene.positions.astype(np.float64)
    outside = np.ones(scene.n, dtype=bool)
    for box in gt_boxes:
        outside &= ~points_in_box(positions, box)
    kept = np.flatnonzero(outside)

    if kept.size == 0 and gt.n == 0:
        raise ValueError("both set-feature sources are empty")

    rng = np.random.default_rng(seed)
    if kept.size == 0:
        from_scene = np.zeros(n, dtype=bool)
    elif gt.n == 0:
        from_scene = np.ones(n, dtype=bool)
    else:
        from_scene = rng.random(n) < scene_share(scene_nz, gt_nz, ratio_multiplier)

    dim = gt.d if gt.n else scene.d
    out_positions = np.empty((n, 3), dtype=np.float32)
    out_vectors = np.empty((n, dim), dtype=np.float32)
    scene_draws = np.flatnonzero(from_scene)
    gt_draws = np.flatnonzero(~from_scene)
    if scene_draws.size:
        pick = kept[rng.integers(kept.size, size=scene_draws.size)]
        out_positions[scene_draws] = scene.positions[pick]
        out_vectors[scene_draws] = scene.vectors[pick]
    if gt_draws.size:
        pick = rng.integers(gt.n, size=gt_draws.size)
        out_positions[gt_draws] = gt.positions[pick]
        out_vectors[gt_draws] = gt.vectors[pick]
    return SetFeature(out_positions, out_vectors)
