"""Shared helpers: random boxes, Monte-Carlo overlap oracles, rigid moves."""

import math

import numpy as np

from fusedet.geometry import Box3D, bev_corners, box_corners, wrap_angle


def random_box(rng, center_scale=10.0, dim_lo=0.5, dim_hi=4.0) -> Box3D:
    return Box3D(
        center=rng.uniform(-center_scale, center_scale, size=3),
        dims=rng.uniform(dim_lo, dim_hi, size=3),
        yaw=rng.uniform(-math.pi, math.pi),
    )


def overlapping_pair(rng, center_scale=10.0):
    a = random_box(rng, center_scale)
    b = Box3D(
        center=a.center + rng.normal(scale=1.0, size=3),
        dims=a.dims * np.exp(rng.normal(scale=0.25, size=3)),
        yaw=a.yaw + rng.normal(scale=0.5),
    )
    return a, b


def _inside_bev(box, pts):
    d = pts - box.center[:2]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return (np.abs(lx) <= box.dims[0] / 2) & (np.abs(ly) <= box.dims[1] / 2)


def _inside_3d(box, pts):
    ok = _inside_bev(box, pts[:, :2])
    return ok & (np.abs(pts[:, 2] - box.center[2]) <= box.dims[2] / 2)


def mc_iou_bev(a, b, n, rng):
    """Point-sampling IoU oracle over the joint BEV bounding rectangle."""
    pts = np.concatenate([bev_corners(a), bev_corners(b)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    samples = rng.uniform(lo, hi, size=(n, 2))
    in_a = _inside_bev(a, samples)
    in_b = _inside_bev(b, samples)
    union = (in_a | in_b).sum()
    return (in_a & in_b).sum() / union if union else 0.0


def mc_iou_3d(a, b, n, rng):
    """Point-in-box volume oracle over the joint 3D bounding region."""
    pts = np.concatenate([box_corners(a), box_corners(b)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    samples = rng.uniform(lo, hi, size=(n, 3))
    in_a = _inside_3d(a, samples)
    in_b = _inside_3d(b, samples)
    union = (in_a | in_b).sum()
    return (in_a & in_b).sum() / union if union else 0.0


def rigid_move_box(box, angle, shift):
    """Rotate a box about +z and translate (the rigid moves boxes stay boxes under)."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Box3D(
        center=rot @ box.center + np.asarray(shift, dtype=np.float64),
        dims=box.dims.copy(),
        yaw=wrap_angle(box.yaw + angle),
    )
