"""LiDAR-dominant cascade controller.

Stage 1 runs on real points only; its detections become the second stage's
RoIs; the two index-aligned instance sets are merged by a convex weight
before NMS and the score floor. Yaw is averaged on unit vectors since naive
angle averaging breaks at the +-pi wrap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detector import (
    BevClassMap,
    build_bev_objectness,
    extract_spatial_features,
    pseudo_feature_grid,
    stage1_refine,
    stage2_refine,
)
from .geometry import Box3D, CameraModel, Detection, nms, wrap_angle
from .hpr import hpr_encode
from .pseudo_cloud import PseudoCloud, crop_rois, depth_to_pseudo_cloud

MODE_STAGE1 = "stage1"
MODE_STAGE2 = "stage2"
MODE_CASCADE = "cascade"
MODES = (MODE_STAGE1, MODE_STAGE2, MODE_CASCADE)


class ConfigurationError(ValueError):
    """Pipeline invoked with inputs inconsistent with its configuration."""


@dataclass
class PipelineConfig:
    alpha: float = 0.5
    nms_iou: float = 0.5
    score_floor: float = 0.05
    mode: str = MODE_CASCADE
    stage1_use_pseudo: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class FrameInputs:
    """Everything the pipeline may need for one frame."""

    frame_id: str
    lidar: np.ndarray  # (N, 4)
    proposals: list  # Box3D
    proposal_classes: list
    cam: CameraModel = None
    depth: np.ndarray = None
    rgb: np.ndarray = None
    pseudo: PseudoCloud = None
    bev_map: BevClassMap = None


def fuse_instances(d_l, d_m, alpha: float):
    """Convex instance-level merge of two index-aligned detection sets.

    Scores, centers, and dims combine linearly; yaw combines on unit
    vectors (ties at antipodal yaws keep the first-stage yaw). The alpha
    endpoints return exact copies of the corresponding input.
    """
    if len(d_l) != len(d_m):
        raise ValueError(f"instance sets differ in length: {len(d_l)} vs {len(d_m)}")
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return [d.copy() for d in d_l]
    if alpha == 0.0:
        return [d.copy() for d in d_m]
    fused = []
    beta = 1.0 - alpha
    for a, b in zip(d_l, d_m):
        center = alpha * a.box.center + beta * b.box.center
        dims = alpha * a.box.dims + beta * b.box.dims
        vx = alpha * math.cos(a.box.yaw) + beta * math.cos(b.box.yaw)
        vy = alpha * math.sin(a.box.yaw) + beta * math.sin(b.box.yaw)
        if math.hypot(vx, vy) < 1e-12:
            yaw = a.box.yaw
        else:
            yaw = math.atan2(vy, vx)
        fused.append(
            Detection(
                box=Box3D(center=center, dims=dims, yaw=wrap_angle(yaw)),
                score=alpha * a.score + beta * b.score,
                class_id=a.class_id,
            )
        )
    return fused


def _pseudo_as_points(cloud: PseudoCloud) -> np.ndarray:
    """Raw pseudo points as (N, 4) with the red channel standing in for intensity."""
    return np.concatenate([cloud.xyz, cloud.rgb[:, :1]], axis=1)


def resolve_pseudo_cloud(frame: FrameInputs) -> PseudoCloud:
    if frame.pseudo is not None:
        return frame.pseudo
    if frame.depth is None or frame.cam is None:
        raise ConfigurationError(
            f"frame {frame.frame_id}: pseudo inputs (depth/calib or cloud) required"
        )
    rgb = frame.rgb
    if rgb is None:
        rgb = np.full(frame.depth.shape + (3,), 0.5)
    return depth_to_pseudo_cloud(frame.depth, rgb, frame.cam)


def run_pipeline(frame: FrameInputs, params, net_cfg, pipe_cfg: PipelineConfig):
    """Run the configured stages on one frame and return final detections."""
    needs_pseudo = pipe_cfg.mode != MODE_STAGE1 or pipe_cfg.stage1_use_pseudo
    cloud = resolve_pseudo_cloud(frame) if needs_pseudo else None

    stage1_points = frame.lidar
    if pipe_cfg.stage1_use_pseudo and len(cloud):
        stage1_points = np.concatenate([frame.lidar, _pseudo_as_points(cloud)], axis=0)

    grid_l, _ = extract_spatial_features(stage1_points, net_cfg.voxel, params.vox_mlp)
    bev_map = frame.bev_map
    if bev_map is None:
        bev_map = build_bev_objectness(
            stage1_points,
            x_range=net_cfg.voxel.extent[0],
            y_range=net_cfg.voxel.extent[1],
        )
    d_l = stage1_refine(
        grid_l, frame.proposals, bev_map, params.heads1,
        pool_g=net_cfg.pool_g, psw_samples=net_cfg.psw_samples,
        class_ids=frame.proposal_classes,
    )

    if pipe_cfg.mode == MODE_STAGE1:
        dets = d_l
    else:
        cropped = crop_rois(cloud, [d.box for d in d_l], net_cfg.crop_margin)
        encoded, _ = hpr_encode(cropped, net_cfg.hpr, params.hpr)
        grid_c, _ = pseudo_feature_grid(cropped.xyz, encoded, net_cfg.pseudo_voxel)
        d_m = stage2_refine(
            grid_l, grid_c, d_l, params.heads2, params.fusion, pool_g=net_cfg.pool_g
        )
        if pipe_cfg.mode == MODE_STAGE2:
            dets = d_m
        else:
            dets = fuse_instances(d_l, d_m, pipe_cfg.alpha)

    dets = nms(dets, pipe_cfg.nms_iou)
    return [d for d in dets if d.score >= pipe_cfg.score_floor]
