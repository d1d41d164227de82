"""Readers/writers for KITTI-style velodyne scans, calibration, labels, and
depth maps.

File formats:
  * velodyne ``.bin``: little-endian float32 quadruples (x, y, z, intensity)
  * calib ``.txt``: ``KEY: v v v ...`` lines (P2, R0_rect, Tr_velo_to_cam)
  * label ``.txt``: 15- or 16-field whitespace lines, floats at 6 sig digits
  * depth ``.png``: 16-bit single channel, meters = value / 256
  * depth/rgb ``.f32grid``: magic + dims header, float32 planes
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box3D, CameraModel, wrap_angle

F32GRID_MAGIC = b"F32G"
DEPTH_PNG_SCALE = 256.0


class FormatError(ValueError):
    """Raised when an input file does not match its declared format."""


# ---------------------------------------------------------------------------
# velodyne


def read_velodyne(path) -> np.ndarray:
    """Read a velodyne scan as an (N, 4) float64 array of x, y, z, intensity."""
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise FormatError(
            f"{path}: velodyne size {len(raw)} not divisible by 16 "
            f"(trailing {len(raw) % 16} bytes at offset {len(raw) - len(raw) % 16})"
        )
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return pts.astype(np.float64)


def write_velodyne(path, points: np.ndarray):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    Path(path).write_bytes(pts.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# calibration


def _parse_calib_floats(lines: dict, key: str, count: int, path) -> np.ndarray:
    if key not in lines:
        raise FormatError(f"{path}: missing calib key {key!r}")
    vals = lines[key]
    if len(vals) != count:
        raise FormatError(
            f"{path}: calib key {key!r} has {len(vals)} values, expected {count}"
        )
    return np.array(vals, dtype=np.float64)


def read_calib(path, image_w: int = 1242, image_h: int = 375) -> CameraModel:
    """Parse a KITTI calib file into a CameraModel.

    Composes ``cam_from_lidar`` from R0_rect and Tr_velo_to_cam and folds
    the P2 translation column into the transform (standard rectified-camera
    composition). The composed rotation is re-orthonormalized via SVD after
    a 1e-3 orthonormality gate on R0.
    """
    lines = {}
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if not ln or ":" not in ln:
            continue
        key, rest = ln.split(":", 1)
        try:
            lines[key.strip()] = [float(tok) for tok in rest.split()]
        except ValueError as exc:
            raise FormatError(f"{path}: bad float in calib line {key!r}: {exc}")

    p2 = _parse_calib_floats(lines, "P2", 12, path).reshape(3, 4)
    r0 = _parse_calib_floats(lines, "R0_rect", 9, path).reshape(3, 3)
    tr = _parse_calib_floats(lines, "Tr_velo_to_cam", 12, path).reshape(3, 4)

    if np.abs(r0 @ r0.T - np.eye(3)).max() > 1e-3:
        raise FormatError(f"{path}: R0_rect is not orthonormal within 1e-3")

    fx, fy = p2[0, 0], p2[1, 1]
    cx, cy = p2[0, 2], p2[1, 2]
    if fx <= 0 or fy <= 0:
        raise FormatError(f"{path}: P2 focal lengths must be positive")

    rot = r0 @ tr[:, :3]
    trans = r0 @ tr[:, 3]
    # camera-center offset hidden in P2's fourth column
    k_inv = np.array(
        [[1.0 / fx, 0.0, -cx / fx], [0.0, 1.0 / fy, -cy / fy], [0.0, 0.0, 1.0]]
    )
    trans = trans + k_inv @ p2[:, 3]

    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] *= -1.0
        rot = u @ vt

    return CameraModel(
        fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy),
        rotation=rot, translation=trans, image_w=image_w, image_h=image_h,
    )


def write_calib(path, cam: CameraModel):
    """Write a CameraModel as a KITTI calib file (identity R0)."""
    p2 = np.array(
        [
            [cam.fx, 0.0, cam.cx, 0.0],
            [0.0, cam.fy, cam.cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]
    )
    tr = np.concatenate([cam.rotation, cam.translation.reshape(3, 1)], axis=1)
    with open(path, "w") as f:
        f.write("P2: " + " ".join(f"{v:.12e}" for v in p2.reshape(-1)) + "\n")
        f.write("R0_rect: " + " ".join(f"{v:.12e}" for v in np.eye(3).reshape(-1)) + "\n")
        f.write("Tr_velo_to_cam: " + " ".join(f"{v:.12e}" for v in tr.reshape(-1)) + "\n")


# ---------------------------------------------------------------------------
# labels


@dataclass
class KittiLabel:
    """One KITTI label line; location is the bottom-center in the camera frame."""

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple  # (left, top, right, bottom) px
    dims: tuple  # (h, w, l) m
    location: tuple  # (x, y, z) camera frame
    rotation_y: float
    score: float | None = None

    def __post_init__(self):
        left, top, right, bottom = self.bbox
        if right < left or bottom < top:
            raise ValueError(f"degenerate 2D bbox {self.bbox}")
        if self.class_name != "DontCare" and any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be positive for {self.class_name}")

    @property
    def evaluable(self) -> bool:
        return self.class_name != "DontCare"

    @property
    def bbox_height(self) -> float:
        return self.bbox[3] - self.bbox[1]


def read_labels(path) -> list:
    labels = []
    for lineno, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        ln = ln.strip()
        if not ln:
            continue
        fields = ln.split()
        if len(fields) not in (15, 16):
            raise FormatError(
                f"{path}:{lineno}: expected 15 or 16 fields, got {len(fields)}"
            )
        try:
            vals = [float(tok) for tok in fields[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad float: {exc}")
        labels.append(
            KittiLabel(
                class_name=fields[0],
                truncation=vals[0],
                occlusion=int(vals[1]),
                alpha=vals[2],
                bbox=tuple(vals[3:7]),
                dims=tuple(vals[7:10]),
                location=tuple(vals[10:13]),
                rotation_y=vals[13],
                score=vals[14] if len(fields) == 16 else None,
            )
        )
    return labels


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_labels(path, labels):
    with open(path, "w") as f:
        for lab in labels:
            fields = [
                lab.class_name,
                _fmt(lab.truncation),
                str(int(lab.occlusion)),
                _fmt(lab.alpha),
                *[_fmt(v) for v in lab.bbox],
                *[_fmt(v) for v in lab.dims],
                *[_fmt(v) for v in lab.location],
                _fmt(lab.rotation_y),
            ]
            if lab.score is not None:
                fields.append(_fmt(lab.score))
            f.write(" ".join(fields) + "\n")


def label_to_lidar_box(label: KittiLabel, cam: CameraModel) -> Box3D:
    """Convert a camera-frame label box to a LiDAR-frame Box3D via the calib."""
    h, w, l = label.dims
    bottom_center = np.array(label.location, dtype=np.float64)
    center_cam = bottom_center + np.array([0.0, -h / 2.0, 0.0])
    center = cam.cam_to_lidar(center_cam)
    # heading: length axis direction (cos ry, 0, -sin ry) in the camera frame
    head_cam = np.array([math.cos(label.rotation_y), 0.0, -math.sin(label.rotation_y)])
    head = cam.cam_to_lidar(center_cam + head_cam) - center
    yaw = math.atan2(head[1], head[0])
    return Box3D(center=center, dims=(l, w, h), yaw=yaw)


def lidar_box_to_label(
    box: Box3D,
    cam: CameraModel,
    class_name: str = "Car",
    score: float | None = None,
    truncation: float = 0.0,
    occlusion: int = 0,
    bbox: tuple | None = None,
) -> KittiLabel:
    """Convert a LiDAR-frame Box3D to a KITTI label (inverse of label_to_lidar_box)."""
    l, w, h = box.dims
    center_cam = cam.lidar_to_cam(box.center)
    bottom_center = center_cam + np.array([0.0, h / 2.0, 0.0])
    head = np.array([math.cos(box.yaw), math.sin(box.yaw), 0.0])
    head_cam = cam.lidar_to_cam(box.center + head) - center_cam
    ry = math.atan2(-head_cam[2], head_cam[0])
    if bbox is None:
        bbox = _project_bbox(box, cam)
    alpha = wrap_angle(ry - math.atan2(bottom_center[0], bottom_center[2]))
    return KittiLabel(
        class_name=class_name,
        truncation=truncation,
        occlusion=occlusion,
        alpha=alpha,
        bbox=bbox,
        dims=(h, w, l),
        location=tuple(float(v) for v in bottom_center),
        rotation_y=ry,
        score=score,
    )


def _project_bbox(box: Box3D, cam: CameraModel) -> tuple:
    from .geometry import box_corners, project_points

    uv, _, valid = project_points(box_corners(box), cam)
    if not valid.any():
        return (0.0, 0.0, 0.0, 0.0)
    uv = uv[valid]
    left = float(np.clip(uv[:, 0].min(), 0, cam.image_w - 1))
    right = float(np.clip(uv[:, 0].max(), 0, cam.image_w - 1))
    top = float(np.clip(uv[:, 1].min(), 0, cam.image_h - 1))
    bottom = float(np.clip(uv[:, 1].max(), 0, cam.image_h - 1))
    return (left, top, right, bottom)


# ---------------------------------------------------------------------------
# depth maps


def read_depth_png(path) -> np.ndarray:
    """Read a KITTI depth-completion PNG: 16-bit single channel, /256 meters."""
    img = Image.open(path)
    if img.mode not in ("I;16", "I;16B", "I"):
        raise FormatError(f"{path}: expected 16-bit single-channel PNG, got mode {img.mode}")
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a single channel, got shape {arr.shape}")
    if img.mode == "I" and arr.max(initial=0) > 0xFFFF:
        raise FormatError(f"{path}: pixel values exceed 16-bit range")
    return arr.astype(np.float64) / DEPTH_PNG_SCALE


def write_depth_png(path, depth_m: np.ndarray):
    vals = np.asarray(depth_m, dtype=np.float64) * DEPTH_PNG_SCALE
    vals = np.round(vals)
    if vals.min(initial=0.0) < 0 or vals.max(initial=0.0) > 0xFFFF:
        raise ValueError("depth out of range for 16-bit PNG encoding")
    Image.fromarray(vals.astype(np.uint16), mode="I;16").save(path)


def read_f32grid(path, expect_channels: int | None = None) -> np.ndarray:
    """Read a raw float32 grid: magic, h, w, c header then h*w*c LE floats.

    Returns (h, w) for single-channel files, (h, w, c) otherwise.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != F32GRID_MAGIC:
        raise FormatError(f"{path}: missing f32grid magic header")
    h, w, c = struct.unpack("<III", raw[4:16])
    expected = 16 + h * w * c * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: f32grid size {len(raw)} != expected {expected}")
    if expect_channels is not None and c != expect_channels:
        raise FormatError(f"{path}: f32grid has {c} channels, expected {expect_channels}")
    grid = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, c)
    return grid[:, :, 0].astype(np.float64) if c == 1 else grid.astype(np.float64)


def write_f32grid(path, grid: np.ndarray):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[:, :, None]
    h, w, c = grid.shape
    with open(path, "wb") as f:
        f.write(F32GRID_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(grid.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    """Read a depth map from .png or .f32grid by extension."""
    path = Path(path)
    if path.suffix == ".png":
        return read_depth_png(path)
    if path.suffix == ".f32grid":
        return read_f32grid(path, expect_channels=1)
    raise FormatError(f"{path}: unknown depth format {path.suffix!r}")
