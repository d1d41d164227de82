"""Toy training loop on synthetic scenes.

Batches are prepared against the current parameters: stage-1 boxes are
decoded once and frozen as the second stage's RoIs (standard two-stage
detach semantics), so the loss is a pure function of the parameters within
a step. Scenes regenerate deterministically from the run seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .cascade import FrameInputs, resolve_pseudo_cloud
from .detector import (
    VoxelGrid,
    decode_box_residual,
    encode_box_residual,
    pool_roi,
    voxel_stats,
)
from .geometry import Box3D, iou_3d
from .losses import RoiTarget, TrainingExample, sgd_step, total_loss
from .model import NetConfig, PipelineParams, create_params
from .pseudo_cloud import crop_rois
from .synth import NoiseModel, ProposalJitter, SceneSpec, bench_frame

POSITIVE_IOU = 0.55


@dataclass
class TrainConfig:
    n_scenes: int = 500
    steps: int = 200
    lr: float = 1e-3
    batch_size: int = 4
    seed: int = 0
    pos_iou: float = POSITIVE_IOU
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: NoiseModel = field(
        default_factory=lambda: NoiseModel(
            sigma0=0.02, sigma1=0.002, bleed_width=2, bleed_rate=0.5, bleed_depth=0.4
        )
    )
    jitter: ProposalJitter = field(default_factory=ProposalJitter)


def assign_targets(rois, class_ids, gts, pos_iou: float = POSITIVE_IOU) -> list:
    """Class-matched best-IoU assignment; IoU >= pos_iou marks a positive."""
    targets = []
    for roi, cid in zip(rois, class_ids):
        best_gt, best_iou = None, 0.0
        for gt in gts:
            if gt.class_id != cid:
                continue
            ov = iou_3d(roi, gt.box)
            if ov > best_iou:
                best_gt, best_iou = gt, ov
        if best_gt is not None and best_iou >= pos_iou:
            targets.append(
                RoiTarget(
                    roi=roi, class_id=cid, label=1,
                    target_residual=encode_box_residual(best_gt.box, roi),
                    gt_box=best_gt.box,
                )
            )
        else:
            targets.append(RoiTarget(roi=roi, class_id=cid, label=0))
    return targets


def prepare_example(
    frame: FrameInputs,
    gts,
    params: PipelineParams,
    cfg: NetConfig,
    pos_iou: float = POSITIVE_IOU,
) -> TrainingExample:
    """Freeze everything parameter-independent for one frame's loss."""
    coords, stats = voxel_stats(frame.lidar, cfg.voxel)
    stage1 = assign_targets(frame.proposals, frame.proposal_classes, gts, pos_iou)

    # decode stage-1 boxes with the current parameters, then detach
    feats, _ = params.vox_mlp.forward(stats)
    grid = VoxelGrid(cfg.voxel, coords, feats)
    rois2, classes2 = [], []
    for prop, cid in zip(frame.proposals, frame.proposal_classes):
        f, _ = pool_roi(grid, prop, cfg.pool_g)
        res, _ = params.heads1.reg.forward(f.vec)
        rois2.append(decode_box_residual(res, prop))
        classes2.append(cid)
    stage2 = assign_targets(rois2, classes2, gts, pos_iou)

    cloud = resolve_pseudo_cloud(frame)
    cropped = crop_rois(cloud, rois2, cfg.crop_margin)
    return TrainingExample(
        voxel_coords=coords, voxel_stats=stats, stage1=stage1, stage2=stage2,
        cloud=cropped,
    )


def training_frame(cfg: TrainConfig, index: int):
    """Deterministic (FrameInputs, gts) for scene `index` of the run."""
    spec = replace(cfg.scene, seed=cfg.seed * 1_000_003 + index)
    return bench_frame(spec, cfg.noise, cfg.jitter)


@dataclass
class TrainResult:
    params: PipelineParams
    history: list  # (step, LossBreakdown) rows; final row re-evaluates batch 0
    first_total: float
    final_total: float


def train(
    cfg: TrainConfig,
    net_cfg: NetConfig,
    params: PipelineParams = None,
    log_path=None,
    progress=None,
) -> TrainResult:
    """Run the seeded SGD protocol; the last history row re-evaluates the
    step-0 batch with the final parameters."""
    if params is None:
        params = create_params(net_cfg, seed=cfg.seed)
    param_dict = params.named_params()
    history = []

    def batch_indices(step):
        return [
            (step * cfg.batch_size + j) % cfg.n_scenes for j in range(cfg.batch_size)
        ]

    def build_examples(idxs):
        examples = []
        for i in idxs:
            frame, gts = training_frame(cfg, i)
            examples.append(prepare_example(frame, gts, params, net_cfg, cfg.pos_iou))
        return examples

    for step in range(cfg.steps):
        examples = build_examples(batch_indices(step))
        breakdown, grads = total_loss(examples, params, net_cfg)
        history.append((step, breakdown))
        sgd_step(param_dict, grads, cfg.lr)
        if progress is not None and (step % 20 == 0 or step == cfg.steps - 1):
            progress(step, breakdown)

    final_breakdown, _ = total_loss(build_examples(batch_indices(0)), params, net_cfg)
    history.append((cfg.steps, final_breakdown))

    if log_path is not None:
        write_training_log(log_path, history)

    return TrainResult(
        params=params,
        history=history,
        first_total=history[0][1].total,
        final_total=final_breakdown.total,
    )


def write_training_log(path, history):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "L_RPN", "L_L", "L_Laux", "L_Caux", "L_M", "total"])
        for step, bd in history:
            writer.writerow([step] + [f"{v:.8f}" for v in bd.as_row()])
