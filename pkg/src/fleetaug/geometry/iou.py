"""Rotated box overlap: exact polygon clipping for BEV and 3D IoU."""

from typing import List, Sequence, Tuple

import numpy as np

from fleetaug.geometry.boxes import BOX_DIM, Box3D, box_corners_bev, corners_bev_array

Vertex = Tuple[float, float]

_EPS = 1e-12


def _cross(o: Vertex, a: Vertex, b: Vertex) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _edge_intersection(s: Vertex, p: Vertex, a: Vertex, b: Vertex) -> Vertex:
    """Intersection of segment s->p with the infinite line a->b."""
    x1, y1 = s
    x2, y2 = p
    x3, y3 = a
    x4, y4 = b
    denom = (x1 - x2) * (y3 - y4) - (y1 - y2) * (x3 - x4)
    if denom == 0.0:
        return s
    t = ((x1 - x3) * (y3 - y4) - (y1 - y3) * (x3 - x4)) / denom
    return (x1 + t * (x2 - x1), y1 + t * (y2 - y1))


def clip_polygon(subject: Sequence[Vertex], window: Sequence[Vertex]) -> List[Vertex]:
    """
    Sutherland-Hodgman clipping of ``subject`` against a convex CCW ``window``.

    Args:
        subject: Polygon vertices
        window: Convex clipping polygon, counter-clockwise

    Returns:
        Vertices of the clipped polygon (possibly empty)
    """
    output = [tuple(v) for v in subject]
    count = len(window)
    for i in range(count):
        a = tuple(window[i])
        b = tuple(window[(i + 1) % count])
        vertices = output
        output = []
        if not vertices:
            break
        previous = vertices[-1]
        previous_inside = _cross(a, b, previous) >= 0.0
        for current in vertices:
            current_inside = _cross(a, b, current) >= 0.0
            if current_inside:
                if not previous_inside:
                    output.append(_edge_intersection(previous, current, a, b))
                output.append(current)
            elif previous_inside:
                output.append(_edge_intersection(previous, current, a, b))
            previous, previous_inside = current, current_inside
    return output


def polygon_area(vertices: Sequence[Vertex]) -> float:
    """Shoelace area; polygons with fewer than 3 vertices have zero area."""
    if len(vertices) < 3:
        return 0.0
    total = 0.0
    count = len(vertices)
    for i in range(count):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % count]
        total += x1 * y2 - x2 * y1
    return abs(total) / 2.0


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    """Exact area of the footprint intersection of two boxes."""
    if not _may_overlap(a, b):
        return 0.0
    clipped = clip_polygon(
        [tuple(v) for v in box_corners_bev(a)], [tuple(v) for v in box_corners_bev(b)]
    )
    return polygon_area(clipped)


def _may_overlap(a: Box3D, b: Box3D) -> bool:
    reach = (np.hypot(a.length, a.width) + np.hypot(b.length, b.width)) / 2.0
    return np.hypot(a.cx - b.cx, a.cy - b.cy) <= reach + _EPS


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of two oriented boxes, in [0, 1]."""
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.length * a.width + b.length * b.width - inter
    return float(min(1.0, max(0.0, inter / union)))


def _z_overlap(a: Box3D, b: Box3D) -> float:
    a_lo, a_hi = a.z_range
    b_lo, b_hi = b.z_range
    return max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: footprint intersection times z overlap over volume union."""
    dz = _z_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def _pair_intersection_areas(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """
    Intersection areas for aligned pairs of convex quadrilaterals.

    The intersection polygon's vertices are the corners of each quad lying in
    the other plus all edge-edge crossings. They are ordered by angle around
    their centroid and summed with the shoelace formula.

    Args:
        corners_a: (P, 4, 2) CCW corners
        corners_b: (P, 4, 2) CCW corners

    Returns:
        (P,) intersection areas
    """
    pairs = corners_a.shape[0]
    if pairs == 0:
        return np.zeros(0, dtype=np.float64)

    def inside(points: np.ndarray, quad: np.ndarray) -> np.ndarray:
        # points (P, K, 2), quad (P, 4, 2); inside iff left of every CCW edge
        start = quad[:, :, None, :]
        edge = np.roll(quad, -1, axis=1)[:, :, None, :] - start
        rel = points[:, None, :, :] - start
        cross = edge[..., 0] * rel[..., 1] - edge[..., 1] * rel[..., 0]
        return np.all(cross >= -1e-9, axis=1)

    a_in_b = inside(corners_a, corners_b)
    b_in_a = inside(corners_b, corners_a)

    # Edge-edge crossings, (P, 4, 4)
    p = corners_a[:, :, None, :]
    r = (np.roll(corners_a, -1, axis=1) - corners_a)[:, :, None, :]
    q = corners_b[:, None, :, :]
    s = (np.roll(corners_b, -1, axis=1) - corners_b)[:, None, :, :]
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = q - p
    safe = np.where(np.abs(denom) < _EPS, 1.0, denom)
    t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / safe
    u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / safe
    crossing = (np.abs(denom) >= _EPS) & (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)
    crossing_points = p + t[..., None] * r

    candidates = np.concatenate(
        [corners_a, corners_b, crossing_points.reshape(pairs, 16, 2)], axis=1
    )
    valid = np.concatenate([a_in_b, b_in_a, crossing.reshape(pairs, 16)], axis=1)
    counts = valid.sum(axis=1)

    weights = valid.astype(np.float64)
    centroid = (candidates * weights[..., None]).sum(axis=1) / np.maximum(counts, 1)[:, None]
    rel = candidates - centroid[:, None, :]
    angles = np.where(valid, np.arctan2(rel[..., 1], rel[..., 0]), np.inf)
    order = np.argsort(angles, axis=1, kind="stable")
    ordered = np.take_along_axis(candidates, order[..., None], axis=1)
    ordered_valid = np.take_along_axis(valid, order, axis=1)
    # Invalid slots collapse onto the first vertex so they add no area.
    ordered = np.where(ordered_valid[..., None], ordered, ordered[:, :1, :])
    nxt = np.roll(ordered, -1, axis=1)
    area = 0.5 * np.abs(
        np.sum(ordered[..., 0] * nxt[..., 1] - nxt[..., 0] * ordered[..., 1], axis=1)
    )
    return np.where(counts >= 3, area, 0.0)


def _candidate_pairs(boxes_a: np.ndarray, boxes_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # Boxes whose centers are farther apart than the sum of half diagonals
    # cannot overlap.
    half_diag_a = np.hypot(boxes_a[:, 3], boxes_a[:, 4]) / 2.0
    half_diag_b = np.hypot(boxes_b[:, 3], boxes_b[:, 4]) / 2.0
    dx = boxes_a[:, None, 0] - boxes_b[None, :, 0]
    dy = boxes_a[:, None, 1] - boxes_b[None, :, 1]
    reach = half_diag_a[:, None] + half_diag_b[None, :]
    return np.nonzero(dx * dx + dy * dy <= (reach + _EPS) ** 2)


def _as_box_array(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, BOX_DIM), dtype=np.float64)
    return arr.reshape(-1, BOX_DIM)


def iou_bev_matrix(boxes_a, boxes_b) -> np.ndarray:
    """
    Pairwise BEV IoU between two box arrays.

    Args:
        boxes_a: (N, 7) array
        boxes_b: (M, 7) array

    Returns:
        (N, M) IoU matrix
    """
    boxes_a = _as_box_array(boxes_a)
    boxes_b = _as_box_array(boxes_b)
    result = np.zeros((boxes_a.shape[0], boxes_b.shape[0]), dtype=np.float64)
    if result.size == 0:
        return result
    ia, ib = _candidate_pairs(boxes_a, boxes_b)
    if ia.size == 0:
        return result
    inter = _pair_intersection_areas(
        corners_bev_array(boxes_a[ia]), corners_bev_array(boxes_b[ib])
    )
    area_a = boxes_a[ia, 3] * boxes_a[ia, 4]
    area_b = boxes_b[ib, 3] * boxes_b[ib, 4]
    union = area_a + area_b - inter
    result[ia, ib] = np.clip(inter / union, 0.0, 1.0)
    return result


def iou_3d_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise 3D IoU between two box arrays, shape (N, M)."""
    boxes_a = _as_box_array(boxes_a)
    boxes_b = _as_box_array(boxes_b)
    result = np.zeros((boxes_a.shape[0], boxes_b.shape[0]), dtype=np.float64)
    if result.size == 0:
        return result
    ia, ib = _candidate_pairs(boxes_a, boxes_b)
    if ia.size == 0:
        return result
    a, b = boxes_a[ia], boxes_b[ib]
    top = np.minimum(a[:, 2] + a[:, 5] / 2.0, b[:, 2] + b[:, 5] / 2.0)
    bottom = np.maximum(a[:, 2] - a[:, 5] / 2.0, b[:, 2] - b[:, 5] / 2.0)
    dz = np.maximum(0.0, top - bottom)
    inter = _pair_intersection_areas(corners_bev_array(a), corners_bev_array(b)) * dz
    union = a[:, 3] * a[:, 4] * a[:, 5] + b[:, 3] * b[:, 4] * b[:, 5] - inter
    result[ia, ib] = np.clip(inter / union, 0.0, 1.0)
    return result
