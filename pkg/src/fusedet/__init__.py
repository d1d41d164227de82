"""LiDAR-dominant two-stage detection with pseudo point clouds.

A desk-scale pipeline: pseudo points back-projected from dense depth maps,
hierarchical residual encoding of their pixel neighborhoods, cascade box
refinement with instance-level fusion, analytic-gradient training losses,
and KITTI-protocol evaluation, exercised end to end on seeded synthetic
scenes.
"""

from .geometry import (
    Box3D,
    CameraModel,
    Detection,
    backproject_pixel,
    box_corners,
    giou_bev,
    giou_3d,
    iou_bev,
    iou_3d,
    nms,
    project_lidar_to_image,
)
from .cascade import FrameInputs, PipelineConfig, fuse_instances, run_pipeline
from .model import NetConfig, create_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Box3D",
    "CameraModel",
    "Detection",
    "FrameInputs",
    "NetConfig",
    "PipelineConfig",
    "backproject_pixel",
    "box_corners",
    "create_params",
    "fuse_instances",
    "giou_3d",
    "giou_bev",
    "iou_3d",
    "iou_bev",
    "load_checkpoint",
    "nms",
    "project_lidar_to_image",
    "run_pipeline",
    "save_checkpoint",
]
