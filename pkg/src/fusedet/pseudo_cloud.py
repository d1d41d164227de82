"""Pseudo point clouds back-projected from dense depth maps.

Each point carries nine attributes: LiDAR-frame position (x, y, z), pixel
color (r, g, b), pixel coordinates (u, v), and range d = ||(x, y, z)||.
A dense per-pixel index supports the grid neighborhood queries used by the
residual encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box3D, CameraModel, backproject_pixels, point_in_box

DEFAULT_CROP_MARGIN = 0.5


@dataclass
class PseudoCloud:
    """Columnar pseudo-point storage plus a pixel -> point index map.

    ``pixel_index[v, u]`` is the point index at pixel (u, v), or -1.
    """

    xyz: np.ndarray  # (N, 3) m, LiDAR frame
    rgb: np.ndarray  # (N, 3) in [0, 1]
    uv: np.ndarray  # (N, 2) px, integer-valued
    d: np.ndarray  # (N,) m
    pixel_index: np.ndarray  # (h, w) int32

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.pixel_index.shape

    def point9(self, j: int) -> np.ndarray:
        """The 9-dim attribute vector (x, y, z, r, g, b, u, v, d) of point j."""
        return np.concatenate(
            [self.xyz[j], self.rgb[j], self.uv[j].astype(np.float64), [self.d[j]]]
        )


def depth_to_pseudo_cloud(
    depth: np.ndarray, image_rgb: np.ndarray, cam: CameraModel
) -> PseudoCloud:
    """Back-project every valid-depth pixel into a pseudo point.

    ``depth`` is (h, w) meters with 0 marking invalid pixels; ``image_rgb``
    is (h, w, 3) in [0, 1] and must match the depth dimensions.
    """
    depth = np.asarray(depth, dtype=np.float64)
    image_rgb = np.asarray(image_rgb, dtype=np.float64)
    if depth.shape != image_rgb.shape[:2]:
        raise ValueError(
            f"depth {depth.shape} and image {image_rgb.shape[:2]} dims differ"
        )
    h, w = depth.shape
    vs, us = np.nonzero(depth > 0)
    pixel_index = np.full((h, w), -1, dtype=np.int32)
    if len(us) == 0:
        return PseudoCloud(
            xyz=np.zeros((0, 3)), rgb=np.zeros((0, 3)),
            uv=np.zeros((0, 2)), d=np.zeros(0), pixel_index=pixel_index,
        )
    uv = np.stack([us, vs], axis=1).astype(np.float64)
    xyz = backproject_pixels(uv, depth[vs, us], cam)
    pixel_index[vs, us] = np.arange(len(us), dtype=np.int32)
    return PseudoCloud(
        xyz=xyz,
        rgb=image_rgb[vs, us].astype(np.float64),
        uv=uv,
        d=np.linalg.norm(xyz, axis=1),
        pixel_index=pixel_index,
    )


def _subcloud(cloud: PseudoCloud, keep_mask: np.ndarray) -> PseudoCloud:
    idx = np.nonzero(keep_mask)[0]
    remap = np.full(len(cloud), -1, dtype=np.int32)
    remap[idx] = np.arange(len(idx), dtype=np.int32)
    pixel_index = np.where(cloud.pixel_index >= 0, remap[cloud.pixel_index], -1)
    return PseudoCloud(
        xyz=cloud.xyz[idx],
        rgb=cloud.rgb[idx],
        uv=cloud.uv[idx],
        d=cloud.d[idx],
        pixel_index=pixel_index.astype(np.int32),
    )


def _enlarged(roi: Box3D, margin: float) -> Box3D:
    return Box3D(roi.center.copy(), roi.dims + 2.0 * margin, roi.yaw)


def crop_roi(cloud: PseudoCloud, roi: Box3D, margin: float = DEFAULT_CROP_MARGIN) -> PseudoCloud:
    """Retain points inside the RoI enlarged by `margin` per side, per dimension."""
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if len(cloud) == 0:
        return cloud
    return _subcloud(cloud, point_in_box(cloud.xyz, _enlarged(roi, margin)))


def crop_rois(cloud: PseudoCloud, rois, margin: float = DEFAULT_CROP_MARGIN) -> PseudoCloud:
    """Union crop over several RoIs (each enlarged as in crop_roi)."""
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if len(cloud) == 0:
        return cloud
    keep = np.zeros(len(cloud), dtype=bool)
    for roi in rois:
        keep |= point_in_box(cloud.xyz, _enlarged(roi, margin))
    return _subcloud(cloud, keep)


def grid_neighbors(cloud: PseudoCloud, j: int, n: int = 1) -> np.ndarray:
    """Pixel-grid neighborhood of point j: (2n+1)^2 indices, centroid first.

    Candidates are taken at integer offsets (du, dv) in [-n, n]^2 around
    the point's pixel, row-major (dv outer, du inner), skipping (0, 0).
    Offsets with no point (outside the image, invalid depth, or cropped
    away) are replaced by the centroid index itself.
    """
    if n < 1:
        raise ValueError("neighbor radius must be >= 1")
    if not (0 <= j < len(cloud)):
        raise IndexError(f"point index {j} out of range 0..{len(cloud) - 1}")
    return _neighbor_table(cloud, n)[j]


def _neighbor_table(cloud: PseudoCloud, n: int) -> np.ndarray:
    """Neighborhood indices for every point: (N, (2n+1)^2) with column 0 = self."""
    h, w = cloud.pixel_index.shape
    u = cloud.uv[:, 0].astype(np.int64)
    v = cloud.uv[:, 1].astype(np.int64)
    npts = len(cloud)
    cols = [np.arange(npts, dtype=np.int64)]
    for dv in range(-n, n + 1):
        for du in range(-n, n + 1):
            if du == 0 and dv == 0:
                continue
            uu, vv = u + du, v + dv
            inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            idx = np.where(
                inside, cloud.pixel_index[np.clip(vv, 0, h - 1), np.clip(uu, 0, w - 1)], -1
            ).astype(np.int64)
            cols.append(np.where(idx >= 0, idx, cols[0]))
    return np.stack(cols, axis=1)


def neighbor_table(cloud: PseudoCloud, n: int = 1) -> np.ndarray:
    """Public batch form of grid_neighbors over the whole cloud."""
    if n < 1:
        raise ValueError("neighbor radius must be >= 1")
    return _neighbor_table(cloud, n)


# ---------------------------------------------------------------------------
# binary persistence: velodyne-style, 9 LE float32 fields per point


def write_pseudo_cloud(path, cloud: PseudoCloud):
    rec = np.concatenate(
        [cloud.xyz, cloud.rgb, cloud.uv.astype(np.float64), cloud.d[:, None]], axis=1
    )
    Path(path).write_bytes(rec.astype("<f4").tobytes())


def read_pseudo_cloud(path, image_shape: tuple) -> PseudoCloud:
    """Read a 9-field cloud file; `image_shape` = (h, w) rebuilds the pixel map."""
    raw = Path(path).read_bytes()
    if len(raw) % 36 != 0:
        raise ValueError(f"{path}: pseudo-cloud size {len(raw)} not divisible by 36")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 9).astype(np.float64)
    h, w = image_shape
    pixel_index = np.full((h, w), -1, dtype=np.int32)
    us = np.rint(rec[:, 6]).astype(np.int64)
    vs = np.rint(rec[:, 7]).astype(np.int64)
    if len(rec) and (us.min() < 0 or us.max() >= w or vs.min() < 0 or vs.max() >= h):
        raise ValueError(f"{path}: pixel coordinates outside image {image_shape}")
    pixel_index[vs, us] = np.arange(len(rec), dtype=np.int32)
    return PseudoCloud(
        xyz=rec[:, 0:3].copy(),
        rgb=rec[:, 3:6].copy(),
        uv=np.stack([us, vs], axis=1).astype(np.float64),
        d=rec[:, 8].copy(),
        pixel_index=pixel_index,
    )
