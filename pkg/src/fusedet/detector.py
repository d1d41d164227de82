"""Stage machinery: voxel features, RoI pooling, PSW scoring, and heads.

The sparse-conv backbone and RPN of full-scale detectors are replaced by a
declared stand-in: occupied voxels carry a small MLP of their mean point
attributes, and proposals come from an external source. Pooling splits an
oriented RoI into G^3 sub-cells and mean-pools occupied-voxel features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, Detection, wrap_angle
from .mlp import Mlp, sigmoid

SOURCE_LIDAR = "lidar"
SOURCE_PSEUDO = "pseudo"
SOURCE_FUSED = "fused"

# prescale so voxel-stat MLP inputs are O(1)
XYZ_SCALE = 0.02
COUNT_NORM = 16.0


@dataclass
class VoxelGridConfig:
    voxel_size: tuple = (0.4, 0.4, 0.3)
    extent: tuple = ((0.0, 70.4), (-40.0, 40.0), (-3.0, 2.0))

    def __post_init__(self):
        if any(s <= 0 for s in self.voxel_size):
            raise ValueError("voxel size must be positive")
        if any(hi <= lo for lo, hi in self.extent):
            raise ValueError("empty extent")

    @property
    def origin(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.extent], dtype=np.float64)

    @property
    def grid_shape(self) -> tuple:
        return tuple(
            int(math.ceil((hi - lo) / s))
            for (lo, hi), s in zip(self.extent, self.voxel_size)
        )


@dataclass
class VoxelGrid:
    """Occupied voxels in canonical (lexicographic coordinate) order."""

    cfg: VoxelGridConfig
    coords: np.ndarray  # (M, 3) int64
    feats: np.ndarray  # (M, C)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def feat_width(self) -> int:
        return self.feats.shape[1]

    @property
    def centers(self) -> np.ndarray:
        size = np.asarray(self.cfg.voxel_size, dtype=np.float64)
        return self.cfg.origin + (self.coords.astype(np.float64) + 0.5) * size


def voxelize(points_xyz: np.ndarray, values: np.ndarray, cfg: VoxelGridConfig):
    """Group points into voxels and mean-pool `values` per occupied voxel.

    Returns (coords, means, counts, inverse, keep_mask): `inverse` maps each
    kept point to its voxel row, `keep_mask` marks points inside the extent.
    """
    points_xyz = np.atleast_2d(points_xyz)[:, :3].astype(np.float64)
    values = np.atleast_2d(values).astype(np.float64)
    size = np.asarray(cfg.voxel_size, dtype=np.float64)
    idx3 = np.floor((points_xyz - cfg.origin) / size).astype(np.int64)
    shape = cfg.grid_shape
    keep = np.all((idx3 >= 0) & (idx3 < np.array(shape)), axis=1)
    idx3 = idx3[keep]
    vals = values[keep]
    if len(idx3) == 0:
        return (
            np.zeros((0, 3), dtype=np.int64),
            np.zeros((0, values.shape[1])),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            keep,
        )
    linear = (idx3[:, 0] * shape[1] + idx3[:, 1]) * shape[2] + idx3[:, 2]
    uniq, inverse = np.unique(linear, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(uniq))
    sums = np.zeros((len(uniq), vals.shape[1]))
    np.add.at(sums, inverse, vals)
    means = sums / counts[:, None]
    coords = np.stack(
        [uniq // (shape[1] * shape[2]), (uniq // shape[2]) % shape[1], uniq % shape[2]],
        axis=1,
    )
    return coords, means, counts, inverse, keep


def voxel_stats(points: np.ndarray, cfg: VoxelGridConfig):
    """Per-voxel MLP inputs: scaled mean x/y/z, mean intensity, count norm."""
    points = np.atleast_2d(points).astype(np.float64)
    if points.shape[0] == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros((0, 5))
    if points.shape[1] < 4:
        points = np.concatenate(
            [points[:, :3], np.zeros((points.shape[0], 1))], axis=1
        )
    coords, means, counts, _, _ = voxelize(points[:, :3], points[:, :4], cfg)
    stats = np.concatenate(
        [
            means[:, :3] * XYZ_SCALE,
            means[:, 3:4],
            (np.minimum(counts, COUNT_NORM) / COUNT_NORM)[:, None],
        ],
        axis=1,
    )
    return coords, stats


def extract_spatial_features(points: np.ndarray, cfg: VoxelGridConfig, vox_mlp: Mlp):
    """Stand-in spatial feature extractor; returns (VoxelGrid, cache)."""
    coords, stats = voxel_stats(points, cfg)
    if len(coords) == 0:
        return VoxelGrid(cfg, coords, np.zeros((0, vox_mlp.out_width))), None
    feats, mlp_cache = vox_mlp.forward(stats)
    return VoxelGrid(cfg, coords, feats), mlp_cache


def pseudo_feature_grid(xyz: np.ndarray, encoded: np.ndarray, cfg: VoxelGridConfig):
    """Voxelize encoded pseudo points, mean feature per voxel.

    Returns (VoxelGrid, (inverse, counts, keep)) for backprop through the mean.
    """
    if len(xyz) == 0:
        width = encoded.shape[1] if encoded.ndim == 2 else 0
        empty = VoxelGrid(cfg, np.zeros((0, 3), dtype=np.int64), np.zeros((0, width)))
        return empty, None
    coords, means, counts, inverse, keep = voxelize(xyz, encoded, cfg)
    return VoxelGrid(cfg, coords, means), (inverse, counts, keep)


def pseudo_grid_backward(cache, d_voxfeats: np.ndarray, n_points: int) -> np.ndarray:
    """Gradient of mean-pooled voxel features back to per-point features."""
    width = d_voxfeats.shape[1] if d_voxfeats.ndim == 2 else 0
    d_points = np.zeros((n_points, width))
    if cache is None:
        return d_points
    inverse, counts, keep = cache
    d_points[keep] = d_voxfeats[inverse] / counts[inverse][:, None]
    return d_points


# ---------------------------------------------------------------------------
# RoI pooling


@dataclass
class RoiFeature:
    """Flattened G^3 sub-cell feature with its modality tag."""

    vec: np.ndarray
    source: str
    grid_g: int

    @property
    def width(self) -> int:
        return self.vec.shape[0]


def pool_roi(grid: VoxelGrid, roi: Box3D, g: int, source: str = SOURCE_LIDAR):
    """Mean-pool occupied-voxel features into G^3 oriented sub-cells.

    Sub-cells are ordered length-major: flat = (ix * G + iy) * G + iz.
    Empty sub-cells stay zero. Returns (RoiFeature, cache) where the cache
    holds (voxel_rows, cell_ids, cell_counts) for backprop.
    """
    if g < 1:
        raise ValueError("G must be >= 1")
    width = grid.feat_width
    vec = np.zeros(g * g * g * width)
    if len(grid) == 0:
        return RoiFeature(vec=vec, source=source, grid_g=g), (np.zeros(0, np.int64), np.zeros(0, np.int64), None)
    local = grid.centers - roi.center
    c, s = math.cos(roi.yaw), math.sin(roi.yaw)
    lx = c * local[:, 0] + s * local[:, 1]
    ly = -s * local[:, 0] + c * local[:, 1]
    lz = local[:, 2]
    half = roi.dims / 2.0
    cell = np.stack(
        [
            np.floor((lx + half[0]) / (roi.dims[0] / g)),
            np.floor((ly + half[1]) / (roi.dims[1] / g)),
            np.floor((lz + half[2]) / (roi.dims[2] / g)),
        ],
        axis=1,
    )
    ok = np.all((cell >= 0) & (cell < g), axis=1)
    rows = np.nonzero(ok)[0]
    cells = cell[ok].astype(np.int64)
    flat = (cells[:, 0] * g + cells[:, 1]) * g + cells[:, 2]
    sums = np.zeros((g * g * g, width))
    np.add.at(sums, flat, grid.feats[rows])
    counts = np.bincount(flat, minlength=g * g * g)
    occupied = counts > 0
    means = np.zeros_like(sums)
    means[occupied] = sums[occupied] / counts[occupied][:, None]
    vec = means.reshape(-1)
    return RoiFeature(vec=vec, source=source, grid_g=g), (rows, flat, counts)


def pool_roi_backward(cache, d_vec: np.ndarray, grid_len: int, width: int) -> np.ndarray:
    """Distribute pooled-feature gradients back onto voxel features."""
    rows, flat, counts = cache
    d_feats = np.zeros((grid_len, width))
    if len(rows) == 0:
        return d_feats
    d_cells = d_vec.reshape(-1, width)
    d_feats[rows] = d_cells[flat] / counts[flat][:, None]
    return d_feats


# ---------------------------------------------------------------------------
# PSW auxiliary scoring


@dataclass
class BevClassMap:
    """Per-cell objectness in [0, 1] over a BEV extent."""

    values: np.ndarray  # (H, W): H along y, W along x
    x_range: tuple
    y_range: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.min(initial=0.0) < 0 or self.values.max(initial=0.0) > 1.0:
            raise ValueError("objectness values must lie in [0, 1]")

    def sample(self, xy: np.ndarray) -> np.ndarray:
        """Bilinear interpolation at (N, 2) BEV points, clamped at the edges."""
        h, w = self.values.shape
        dx = (self.x_range[1] - self.x_range[0]) / w
        dy = (self.y_range[1] - self.y_range[0]) / h
        gx = np.clip((xy[:, 0] - self.x_range[0]) / dx - 0.5, 0.0, w - 1.0)
        gy = np.clip((xy[:, 1] - self.y_range[0]) / dy - 0.5, 0.0, h - 1.0)
        x0 = np.clip(np.floor(gx).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(xy), np.int64)
        y0 = np.clip(np.floor(gy).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(xy), np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = gx - x0
        fy = gy - y0
        v = self.values
        return (
            v[y0, x0] * (1 - fx) * (1 - fy)
            + v[y0, x1] * fx * (1 - fy)
            + v[y1, x0] * (1 - fx) * fy
            + v[y1, x1] * fx * fy
        )


def psw_score(bev_map: BevClassMap, box: Box3D, samples: int = 6) -> float:
    """Mean of bilinear map samples over a G x G grid inside the BEV footprint."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    offs = (np.arange(samples) + 0.5) / samples - 0.5
    ax, ay = np.meshgrid(offs * box.dims[0], offs * box.dims[1], indexing="ij")
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xs = c * ax - s * ay + box.center[0]
    ys = s * ax + c * ay + box.center[1]
    pts = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)
    return float(bev_map.sample(pts).mean())


def build_bev_objectness(
    points: np.ndarray,
    x_range: tuple = (0.0, 70.4),
    y_range: tuple = (-40.0, 40.0),
    cell: float = 0.4,
    ground_z: float = -1.7,
    saturation: float = 6.0,
) -> BevClassMap:
    """Objectness stand-in: saturating density of above-ground LiDAR points."""
    w = int(math.ceil((x_range[1] - x_range[0]) / cell))
    h = int(math.ceil((y_range[1] - y_range[0]) / cell))
    counts = np.zeros((h, w))
    pts = np.atleast_2d(points)
    pts = pts[pts[:, 2] > ground_z + 0.3]
    if len(pts):
        ix = np.floor((pts[:, 0] - x_range[0]) / cell).astype(np.int64)
        iy = np.floor((pts[:, 1] - y_range[0]) / cell).astype(np.int64)
        ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        np.add.at(counts, (iy[ok], ix[ok]), 1.0)
    return BevClassMap(
        values=np.minimum(counts / saturation, 1.0), x_range=x_range, y_range=y_range
    )


# ---------------------------------------------------------------------------
# box residual codec (KITTI-style deltas)


def encode_box_residual(box: Box3D, roi: Box3D) -> np.ndarray:
    """7-dim target: diagonal-normalized offsets, log dim ratios, yaw delta."""
    diag = math.hypot(roi.dims[0], roi.dims[1])
    return np.array(
        [
            (box.center[0] - roi.center[0]) / diag,
            (box.center[1] - roi.center[1]) / diag,
            (box.center[2] - roi.center[2]) / roi.dims[2],
            math.log(box.dims[0] / roi.dims[0]),
            math.log(box.dims[1] / roi.dims[1]),
            math.log(box.dims[2] / roi.dims[2]),
            wrap_angle(box.yaw - roi.yaw),
        ]
    )


def decode_box_residual(res: np.ndarray, roi: Box3D) -> Box3D:
    """Inverse of encode_box_residual."""
    res = np.asarray(res, dtype=np.float64).reshape(7)
    diag = math.hypot(roi.dims[0], roi.dims[1])
    center = roi.center + np.array(
        [res[0] * diag, res[1] * diag, res[2] * roi.dims[2]]
    )
    dims = roi.dims * np.exp(res[3:6])
    return Box3D(center=center, dims=dims, yaw=wrap_angle(roi.yaw + res[6]))


def decode_jacobian(res: np.ndarray, roi: Box3D) -> np.ndarray:
    """d(decoded box params)/d(residual) as a (7,) diagonal (codec is separable)."""
    res = np.asarray(res, dtype=np.float64).reshape(7)
    diag = math.hypot(roi.dims[0], roi.dims[1])
    dims = roi.dims * np.exp(res[3:6])
    return np.array([diag, diag, roi.dims[2], dims[0], dims[1], dims[2], 1.0])


# ---------------------------------------------------------------------------
# heads and stage refiners


@dataclass
class StageHeads:
    reg: Mlp  # pooled feature -> 7 residuals
    cls: Mlp  # pooled feature -> 1 logit

    def named_params(self, prefix: str):
        yield from self.reg.named_params(f"{prefix}.reg")
        yield from self.cls.named_params(f"{prefix}.cls")


def head_forward(heads: StageHeads, f_vec: np.ndarray):
    """Apply both heads; returns (residual (7,), logit, caches)."""
    res, reg_cache = heads.reg.forward(f_vec)
    logit, cls_cache = heads.cls.forward(f_vec)
    return res, float(logit[0]), (reg_cache, cls_cache)


def stage1_refine(
    grid: VoxelGrid,
    proposals,
    bev_map: BevClassMap,
    heads: StageHeads,
    pool_g: int = 6,
    psw_samples: int = 6,
    class_ids=None,
) -> list:
    """First-stage refinement on LiDAR features only.

    Each proposal is pooled, regressed onto, and scored; the head sigmoid
    is averaged with the PSW sample of the decoded box.
    """
    if class_ids is None:
        class_ids = [0] * len(proposals)
    dets = []
    for prop, cid in zip(proposals, class_ids):
        f, _ = pool_roi(grid, prop, pool_g, SOURCE_LIDAR)
        res, logit, _ = head_forward(heads, f.vec)
        box = decode_box_residual(res, prop)
        score = 0.5 * (sigmoid(logit) + psw_score(bev_map, box, psw_samples))
        dets.append(Detection(box=box, score=float(score), class_id=int(cid)))
    return dets


def fuse_roi_features(f_c: RoiFeature, f_l: RoiFeature, fusion_net: Mlp):
    """Concat-MLP RoI-level fusion of the pseudo and LiDAR features."""
    if f_c.source != SOURCE_PSEUDO or f_l.source != SOURCE_LIDAR:
        raise ValueError(
            f"fusion expects (pseudo, lidar) features, got ({f_c.source}, {f_l.source})"
        )
    joint = np.concatenate([f_c.vec, f_l.vec])
    out, cache = fusion_net.forward(joint)
    return RoiFeature(vec=out, source=SOURCE_FUSED, grid_g=f_c.grid_g), cache


def stage2_refine(
    grid_lidar: VoxelGrid,
    grid_pseudo: VoxelGrid,
    rois,
    heads: StageHeads,
    fusion_net: Mlp,
    pool_g: int = 6,
) -> list:
    """Second-stage refinement on fused features; index-aligned with `rois`."""
    dets = []
    for det in rois:
        roi = det.box
        f_c, _ = pool_roi(grid_pseudo, roi, pool_g, SOURCE_PSEUDO)
        f_l, _ = pool_roi(grid_lidar, roi, pool_g, SOURCE_LIDAR)
        fused, _ = fuse_roi_features(f_c, f_l, fusion_net)
        res, logit, _ = head_forward(heads, fused.vec)
        box = decode_box_residual(res, roi)
        dets.append(Detection(box=box, score=float(sigmoid(logit)), class_id=det.class_id))
    return dets
