"""Oriented-box geometry, camera projection, and overlap metrics.

Conventions used across the package:
  * LiDAR frame: x forward, y left, z up, meters.
  * Yaw: rotation about +z, zero along +x, wrapped into (-pi, pi].
  * Image frame: u = column, v = row, pixels; camera z points into the scene.
All math is 64-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CAR, PEDESTRIAN, CYCLIST = 0, 1, 2
CLASS_NAMES = {CAR: "Car", PEDESTRIAN: "Pedestrian", CYCLIST: "Cyclist"}
CLASS_IDS = {name: cid for cid, name in CLASS_NAMES.items()}

# on-edge classification tolerance for polygon clipping
CLIP_EPS = 1e-9

MIN_CAMERA_DEPTH = 1e-6


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.remainder(float(theta), 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


@dataclass
class CameraModel:
    """Pinhole camera with a rigid lidar-to-camera transform.

    ``rotation`` must be orthonormal with determinant +1 (tol 1e-9);
    a point p in the LiDAR frame maps to ``rotation @ p + translation``
    in the camera frame.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    image_w: int
    image_h: int
    _rot_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError(f"rotation not orthonormal (err={err:.3g})")
        self._rot_inv = self.rotation.T

    def lidar_to_cam(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def cam_to_lidar(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.translation) @ self._rot_inv.T


@dataclass
class Box3D:
    """Oriented 3D box: center (m, LiDAR frame), dims (l, w, h), yaw (rad)."""

    center: np.ndarray
    dims: np.ndarray  # (l, w, h)
    yaw: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.center)) or not np.all(np.isfinite(self.dims)):
            raise ValueError("box has non-finite components")
        if np.any(self.dims <= 0):
            raise ValueError(f"box dims must be positive, got {self.dims}")
        self.yaw = wrap_angle(self.yaw)

    @property
    def volume(self) -> float:
        return float(self.dims[0] * self.dims[1] * self.dims[2])

    def copy(self) -> "Box3D":
        return Box3D(self.center.copy(), self.dims.copy(), self.yaw)


@dataclass
class Detection:
    """A scored, classified oriented box."""

    box: Box3D
    score: float
    class_id: int = CAR

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    def copy(self) -> "Detection":
        return Detection(self.box.copy(), self.score, self.class_id)


# ---------------------------------------------------------------------------
# projection


def project_lidar_to_image(p, cam: CameraModel):
    """Project a LiDAR-frame point to (u, v, depth); None if behind the camera."""
    pc = cam.lidar_to_cam(np.asarray(p, dtype=np.float64).reshape(3))
    z = pc[2]
    if z <= MIN_CAMERA_DEPTH:
        return None
    u = cam.fx * pc[0] / z + cam.cx
    v = cam.fy * pc[1] / z + cam.cy
    return float(u), float(v), float(z)


def project_points(pts: np.ndarray, cam: CameraModel):
    """Vectorized projection: returns (uv (N,2), depth (N,), valid (N,))."""
    pc = cam.lidar_to_cam(np.atleast_2d(pts)[:, :3])
    z = pc[:, 2]
    valid = z > MIN_CAMERA_DEPTH
    zsafe = np.where(valid, z, 1.0)
    uv = np.stack(
        [cam.fx * pc[:, 0] / zsafe + cam.cx, cam.fy * pc[:, 1] / zsafe + cam.cy],
        axis=1,
    )
    return uv, z, valid


def backproject_pixel(u: float, v: float, depth: float, cam: CameraModel) -> np.ndarray:
    """Back-project an image pixel at a given depth into the LiDAR frame."""
    if not (np.isfinite(depth) and depth > 0):
        raise ValueError(f"depth must be positive and finite, got {depth}")
    pc = np.array(
        [(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth]
    )
    return cam.cam_to_lidar(pc)


def backproject_pixels(uv: np.ndarray, depth: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Vectorized back-projection of (N,2) pixels at (N,) depths to LiDAR frame."""
    uv = np.atleast_2d(uv).astype(np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~np.isfinite(depth)) or np.any(depth <= 0):
        raise ValueError("all depths must be positive and finite")
    pc = np.stack(
        [
            (uv[:, 0] - cam.cx) * depth / cam.fx,
            (uv[:, 1] - cam.cy) * depth / cam.fy,
            depth,
        ],
        axis=1,
    )
    return cam.cam_to_lidar(pc)


# ---------------------------------------------------------------------------
# box corners and BEV polygons


def box_corners(box: Box3D) -> np.ndarray:
    """8 corners, bottom face CCW starting at (+x, +y), then the top face.

    In the box frame the order is (+l,+w), (-l,+w), (-l,-w), (+l,-w) at
    z = -h/2, repeated at z = +h/2 (all half-extents).
    """
    l, w, h = box.dims
    sx = np.array([1, -1, -1, 1], dtype=np.float64) * (l / 2.0)
    sy = np.array([1, 1, -1, -1], dtype=np.float64) * (w / 2.0)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * sx - s * sy + box.center[0]
    y = s * sx + c * sy + box.center[1]
    bottom = np.stack([x, y, np.full(4, box.center[2] - h / 2.0)], axis=1)
    top = np.stack([x, y, np.full(4, box.center[2] + h / 2.0)], axis=1)
    return np.concatenate([bottom, top], axis=0)


def bev_corners(box: Box3D) -> np.ndarray:
    """The 4 BEV (x, y) corners, CCW."""
    return box_corners(box)[:4, :2]


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a CCW polygon (signed; CCW positive)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` by convex CCW polygon `clip`."""
    output = [subject[i] for i in range(len(subject))]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inputs = output
        output = []
        prev = inputs[-1]
        prev_side = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0])
        for cur in inputs:
            cur_side = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0])
            if cur_side >= -CLIP_EPS:
                if prev_side < -CLIP_EPS:
                    output.append(_segment_line_intersection(prev, cur, a, b))
                output.append(cur)
            elif prev_side >= -CLIP_EPS:
                output.append(_segment_line_intersection(prev, cur, a, b))
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _segment_line_intersection(p1, p2, a, b):
    d = np.asarray(p2, dtype=np.float64) - p1
    e = np.asarray(b, dtype=np.float64) - a
    denom = e[0] * d[1] - e[1] * d[0]
    if abs(denom) < CLIP_EPS * CLIP_EPS:
        return np.asarray(p1, dtype=np.float64)
    t = (e[0] * (a[1] - p1[1]) - e[1] * (a[0] - p1[0])) / denom
    return np.asarray(p1, dtype=np.float64) + t * d


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns hull vertices CCW."""
    pts = sorted({(float(p[0]), float(p[1])) for p in points})
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


# ---------------------------------------------------------------------------
# overlap metrics


def _bev_intersection_area(a: Box3D, b: Box3D) -> float:
    inter = clip_polygon(bev_corners(a), bev_corners(b))
    if len(inter) < 3:
        return 0.0
    return max(0.0, polygon_area(inter))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Rotated-rectangle IoU in bird's-eye view."""
    area_a = float(a.dims[0] * a.dims[1])
    area_b = float(b.dims[0] * b.dims[1])
    inter = _bev_intersection_area(a, b)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def _z_overlap(a: Box3D, b: Box3D) -> float:
    a0, a1 = a.center[2] - a.dims[2] / 2.0, a.center[2] + a.dims[2] / 2.0
    b0, b1 = b.center[2] - b.dims[2] / 2.0, b.center[2] + b.dims[2] / 2.0
    return max(0.0, min(a1, b1) - max(a0, b0))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: BEV intersection area times z-overlap over the volume union."""
    inter = _bev_intersection_area(a, b) * _z_overlap(a, b)
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def giou_bev(a: Box3D, b: Box3D) -> float:
    """BEV generalized IoU with the exact convex hull as enclosing region."""
    area_a = float(a.dims[0] * a.dims[1])
    area_b = float(b.dims[0] * b.dims[1])
    inter = _bev_intersection_area(a, b)
    union = area_a + area_b - inter
    hull = polygon_area(convex_hull(np.concatenate([bev_corners(a), bev_corners(b)])))
    if union <= 0.0 or hull <= 0.0:
        return 0.0
    return inter / union - (hull - union) / hull


def giou_3d(a: Box3D, b: Box3D) -> float:
    """3D generalized IoU: hull volume = BEV hull area times the union z-span."""
    inter = _bev_intersection_area(a, b) * _z_overlap(a, b)
    union = a.volume + b.volume - inter
    hull_area = polygon_area(
        convex_hull(np.concatenate([bev_corners(a), bev_corners(b)]))
    )
    a0, a1 = a.center[2] - a.dims[2] / 2.0, a.center[2] + a.dims[2] / 2.0
    b0, b1 = b.center[2] - b.dims[2] / 2.0, b.center[2] + b.dims[2] / 2.0
    hull_vol = hull_area * (max(a1, b1) - min(a0, b0))
    if union <= 0.0 or hull_vol <= 0.0:
        return 0.0
    return inter / union - (hull_vol - union) / hull_vol


def point_in_box(pts: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points inside an oriented box (boundaries inclusive)."""
    pts = np.atleast_2d(pts)[:, :3] - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local_x = c * pts[:, 0] + s * pts[:, 1]
    local_y = -s * pts[:, 0] + c * pts[:, 1]
    half = box.dims / 2.0
    return (
        (np.abs(local_x) <= half[0])
        & (np.abs(local_y) <= half[1])
        & (np.abs(pts[:, 2]) <= half[2])
    )


# ---------------------------------------------------------------------------
# NMS


def nms(dets, iou_thresh: float):
    """Greedy BEV NMS, descending score, ties broken by input index."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep = []
    for i in order:
        if any(iou_bev(dets[i].box, dets[j].box) > iou_thresh for j in keep):
            continue
        keep.append(i)
    return [dets[i] for i in keep]
