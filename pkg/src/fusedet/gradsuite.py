"""Finite-difference verification of every parameterized operation.

Each check builds a small random instance, computes the analytic gradient,
and sweeps central differences (h = 1e-5) through grad_check. Tolerances:
1e-5 for plain MLPs and the pointwise losses (1e-6 for focal), 1e-4 for
the residual encoder, the GIoU loss, and the full objective.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .detector import VoxelGridConfig, fuse_roi_features, RoiFeature, SOURCE_LIDAR, SOURCE_PSEUDO
from .geometry import Box3D, CameraModel
from .hpr import HprConfig, create_hpr_params, hpr_encode, hpr_encode_backward
from .losses import (
    TrainingExample,
    focal_loss,
    giou_loss,
    grad_check,
    smooth_l1,
    total_loss,
)
from .mlp import Mlp
from .model import NetConfig, create_params
from .pseudo_cloud import depth_to_pseudo_cloud


@dataclass
class SuiteEntry:
    name: str
    tol: float
    max_rel_err: float
    worst_tensor: str
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _check_mlp(seed: int):
    rng = np.random.default_rng(seed)
    widths = [int(rng.integers(2, 5)) for _ in range(3)]
    net = Mlp.create(widths, rng)
    x = rng.normal(size=widths[0])
    v = rng.normal(size=widths[-1])
    params = dict(net.named_params("p"))
    params["x"] = x

    def fn():
        y, _ = net.forward(x)
        return float(v @ y)

    _, cache = net.forward(x)
    analytic: dict = {}
    analytic["x"] = net.backward(cache, v, analytic, "p")
    return grad_check(fn, params, analytic)


def _check_focal(seed: int):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, size=6)
    y = (rng.random(6) < 0.5).astype(float)
    params = {"p": p}

    def fn():
        loss, _ = focal_loss(params["p"], y)
        return float(loss.sum())

    _, grad = focal_loss(p, y)
    return grad_check(fn, params, {"p": grad})


def _check_smooth_l1(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=2.0, size=8)
    x = x[np.abs(np.abs(x) - 1.0) > 0.05]  # stay away from the beta kink
    params = {"x": x}

    def fn():
        loss, _ = smooth_l1(params["x"])
        return float(loss.sum())

    _, grad = smooth_l1(x)
    return grad_check(fn, params, {"x": grad})


def _random_box(rng, near=None) -> Box3D:
    if near is None:
        center = np.array([rng.uniform(5, 30), rng.uniform(-8, 8), rng.uniform(-1, 1)])
        dims = rng.uniform(0.8, 4.0, size=3)
        yaw = rng.uniform(-np.pi, np.pi)
    else:
        center = near.center + rng.normal(scale=0.5, size=3)
        dims = near.dims * np.exp(rng.normal(scale=0.1, size=3))
        yaw = near.yaw + rng.normal(scale=0.2)
    return Box3D(center=center, dims=dims, yaw=yaw)


def _check_giou(seed: int):
    rng = np.random.default_rng(seed)
    gt = _random_box(rng)
    pred = _random_box(rng, near=gt)
    params = {"box": np.concatenate([pred.center, pred.dims, [pred.yaw]])}

    def fn():
        b = params["box"]
        loss, _ = giou_loss(Box3D(center=b[:3], dims=b[3:6], yaw=b[6]), gt)
        return loss

    _, grad = giou_loss(pred, gt)
    return grad_check(fn, params, {"box": grad})


def _check_fusion(seed: int):
    rng = np.random.default_rng(seed)
    wc, wl = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    net = Mlp.create([wc + wl, 4, 3], rng)
    f_c = RoiFeature(vec=rng.normal(size=wc), source=SOURCE_PSEUDO, grid_g=1)
    f_l = RoiFeature(vec=rng.normal(size=wl), source=SOURCE_LIDAR, grid_g=1)
    v = rng.normal(size=3)
    params = dict(net.named_params("p"))

    def fn():
        fused, _ = fuse_roi_features(f_c, f_l, net)
        return float(v @ fused.vec)

    fused, cache = fuse_roi_features(f_c, f_l, net)
    analytic: dict = {}
    net.backward(cache, v, analytic, "p")
    return grad_check(fn, params, analytic)


def _tiny_cloud(rng, cam=None):
    h, w = 10, 14
    if cam is None:
        cam = CameraModel(
            fx=20.0, fy=20.0, cx=w / 2.0, cy=h / 2.0,
            rotation=np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]),
            translation=np.zeros(3), image_w=w, image_h=h,
        )
    depth = np.zeros((h, w))
    mask = rng.random((h, w)) < 0.5
    depth[mask] = rng.uniform(4.0, 12.0, size=int(mask.sum()))
    rgb = rng.random((h, w, 3))
    return depth_to_pseudo_cloud(depth, rgb, cam)


def _check_hpr(seed: int):
    rng = np.random.default_rng(seed)
    cloud = _tiny_cloud(rng)
    cfg = HprConfig(
        steps=2, step_widths=(3, 4), init_width=3,
        init_hidden=3, theta_hidden=3, gamma_hidden=4,
    )
    hpr_params = create_hpr_params(cfg, rng)
    v = rng.normal(size=(len(cloud), cfg.out_width))
    params = dict(hpr_params.named_params("hpr"))

    def fn():
        encoded, _ = hpr_encode(cloud, cfg, hpr_params)
        return float((v * encoded).sum())

    analytic: dict = {}
    _, cache = hpr_encode(cloud, cfg, hpr_params)
    hpr_encode_backward(len(cloud), cfg, hpr_params, cache, v, analytic)
    return grad_check(fn, params, analytic)


def tiny_net_config() -> NetConfig:
    extent = ((0.0, 24.0), (-10.0, 10.0), (-3.0, 2.0))
    return NetConfig(
        voxel=VoxelGridConfig(voxel_size=(1.2, 1.2, 1.0), extent=extent),
        pseudo_voxel=VoxelGridConfig(voxel_size=(0.8, 0.8, 0.6), extent=extent),
        hpr=HprConfig(
            steps=1, step_widths=(3,), init_width=2,
            init_hidden=2, theta_hidden=2, gamma_hidden=3,
        ),
        pool_g=2, psw_samples=2, vox_width=2, vox_hidden=2,
        head_hidden=2, aux_hidden=2, fusion_hidden=3, fusion_width=3,
    )


def tiny_batch(seed: int, cfg: NetConfig):
    """One small prepared frame with positives and negatives."""
    from .losses import RoiTarget
    from .detector import encode_box_residual, voxel_stats

    rng = np.random.default_rng(seed)
    gt1 = Box3D(center=[8.0 + rng.uniform(-1, 1), rng.uniform(-2, 2), -0.9],
                dims=[3.8, 1.6, 1.5], yaw=rng.uniform(-1, 1))
    gt2 = Box3D(center=[14.0, rng.uniform(-3, 3), -0.8], dims=[1.8, 0.7, 1.7],
                yaw=rng.uniform(-1, 1))
    pts = []
    for gt in (gt1, gt2):
        n = 30
        local = (rng.random((n, 3)) - 0.5) * gt.dims
        c, s = np.cos(gt.yaw), np.sin(gt.yaw)
        world = np.stack(
            [
                c * local[:, 0] - s * local[:, 1] + gt.center[0],
                s * local[:, 0] + c * local[:, 1] + gt.center[1],
                local[:, 2] + gt.center[2],
            ],
            axis=1,
        )
        pts.append(np.concatenate([world, np.full((n, 1), 0.5)], axis=1))
    lidar = np.concatenate(pts, axis=0)
    coords, stats = voxel_stats(lidar, cfg.voxel)

    def roi_target(gt, positive):
        roi = _random_box(rng, near=gt)
        if positive:
            return RoiTarget(
                roi=roi, class_id=0, label=1,
                target_residual=encode_box_residual(gt, roi), gt_box=gt,
            )
        return RoiTarget(roi=roi, class_id=0, label=0)

    stage1 = [roi_target(gt1, True), roi_target(gt2, True), roi_target(gt1, False)]
    stage2 = [roi_target(gt1, True), roi_target(gt2, False)]
    cloud = _tiny_cloud(rng)
    return [
        TrainingExample(
            voxel_coords=coords, voxel_stats=stats,
            stage1=stage1, stage2=stage2, cloud=cloud,
        )
    ]


def _check_total_loss(seed: int):
    cfg = tiny_net_config()
    params = create_params(cfg, seed=seed)
    examples = tiny_batch(seed, cfg)
    param_dict = params.named_params()

    def fn():
        breakdown, _ = total_loss(examples, params, cfg, with_grads=False)
        return breakdown.total

    _, analytic = total_loss(examples, params, cfg)
    return grad_check(fn, param_dict, analytic)


CHECKS = (
    ("mlp_apply", _check_mlp, 1e-5),
    ("focal_loss", _check_focal, 1e-6),
    ("smooth_l1", _check_smooth_l1, 1e-5),
    ("giou_loss", _check_giou, 1e-4),
    ("fuse_roi_features", _check_fusion, 1e-5),
    ("hpr_encode", _check_hpr, 1e-4),
    ("total_loss", _check_total_loss, 1e-4),
)


def run_suite(n_seeds: int = 20, base_seed: int = 0) -> list:
    """Run every check over n_seeds seeds; returns one SuiteEntry per op."""
    entries = []
    for name, check, tol in CHECKS:
        start = time.perf_counter()
        worst_err, worst_tensor = 0.0, ""
        for s in range(n_seeds):
            report = check(base_seed * 1000 + s)
            if report.max_rel_err >= worst_err:
                worst_err, worst_tensor = report.max_rel_err, report.worst_tensor
        entries.append(
            SuiteEntry(
                name=name, tol=tol, max_rel_err=worst_err,
                worst_tensor=worst_tensor, seconds=time.perf_counter() - start,
            )
        )
    return entries
