"""Training objective with analytic gradients.

Breakdown: an RPN term (identically zero under the oracle-proposal
stand-in), the first-stage loss, two second-stage single-modality auxiliary
losses, and the fused second-stage loss, combined with fixed weights
(1.0, 0.5, 1.0). Classification uses focal loss on head sigmoids,
regression uses smooth L1 on box residuals, and the fused stage adds a
generalized-IoU term whose gradient is differentiated through the polygon
clipping pipeline (one-sided at clipping-topology changes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CLIP_EPS, Box3D
from .mlp import sigmoid

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SMOOTH_L1_BETA = 1.0
PROB_EPS = 1e-7
DEFAULT_LAMBDAS = (1.0, 0.5, 1.0)


@dataclass
class LossBreakdown:
    """Components of the total objective; total recomputes from parts."""

    l_rpn: float
    l_stage1: float
    l_aux_lidar: float
    l_aux_pseudo: float
    l_fused: float
    lambdas: tuple = DEFAULT_LAMBDAS
    total: float = None

    def __post_init__(self):
        if self.total is None:
            self.total = self.recompute_total()

    def recompute_total(self) -> float:
        lam1, lam2, lam3 = self.lambdas
        return (
            self.l_rpn
            + lam1 * self.l_stage1
            + lam2 * (self.l_aux_lidar + self.l_aux_pseudo)
            + lam3 * self.l_fused
        )

    def as_row(self) -> list:
        return [
            self.l_rpn, self.l_stage1, self.l_aux_lidar,
            self.l_aux_pseudo, self.l_fused, self.total,
        ]


# ---------------------------------------------------------------------------
# elementwise losses


def focal_loss(p, y, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """Focal loss and its gradient w.r.t. the predicted probability.

    Probabilities are clamped to [eps, 1-eps] (eps=1e-7); outside the clamp
    the gradient is zero. Scalar or array arguments broadcast.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64)
    scalar = p_arr.ndim == 0 and y_arr.ndim == 0
    pc = np.clip(p_arr, PROB_EPS, 1.0 - PROB_EPS)
    p_t = np.where(y_arr > 0.5, pc, 1.0 - pc)
    a_t = np.where(y_arr > 0.5, alpha, 1.0 - alpha)
    loss = -a_t * (1.0 - p_t) ** gamma * np.log(p_t)
    # d/dp_t, then flip sign for y = 0 since p_t = 1 - p
    d_pt = a_t * (
        gamma * (1.0 - p_t) ** (gamma - 1.0) * np.log(p_t) - (1.0 - p_t) ** gamma / p_t
    )
    grad = np.where(y_arr > 0.5, d_pt, -d_pt)
    grad = np.where((p_arr > PROB_EPS) & (p_arr < 1.0 - PROB_EPS), grad, 0.0)
    if scalar:
        return float(loss), float(grad)
    return loss, grad


def smooth_l1(x, beta=SMOOTH_L1_BETA):
    """Huber-style smooth L1 and gradient; quadratic inside |x| < beta."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    x_arr = np.asarray(x, dtype=np.float64)
    scalar = x_arr.ndim == 0
    quad = np.abs(x_arr) < beta
    loss = np.where(quad, 0.5 * x_arr * x_arr / beta, np.abs(x_arr) - 0.5 * beta)
    grad = np.where(quad, x_arr / beta, np.sign(x_arr))
    if scalar:
        return float(loss), float(grad)
    return loss, grad


# ---------------------------------------------------------------------------
# GIoU loss with gradients through the polygon pipeline
#
# Every BEV vertex carries a Jacobian w.r.t. the predicted box parameters
# (cx, cy, cz, l, w, h, yaw); clipping intersections chain-rule through the
# two defining segments, so the gradient is exact for the current clipping
# topology.

_CORNER_SL = np.array([0.5, -0.5, -0.5, 0.5])
_CORNER_SW = np.array([0.5, 0.5, -0.5, -0.5])


def _bev_corners_jac(params: np.ndarray):
    cx, cy, _, l, w, _, yaw = params
    c, s = math.cos(yaw), math.sin(yaw)
    sx = _CORNER_SL * l
    sy = _CORNER_SW * w
    pts = np.stack([c * sx - s * sy + cx, s * sx + c * sy + cy], axis=1)
    jac = np.zeros((4, 2, 7))
    jac[:, 0, 0] = 1.0
    jac[:, 1, 1] = 1.0
    jac[:, 0, 3] = c * _CORNER_SL
    jac[:, 1, 3] = s * _CORNER_SL
    jac[:, 0, 4] = -s * _CORNER_SW
    jac[:, 1, 4] = c * _CORNER_SW
    jac[:, 0, 6] = -s * sx - c * sy
    jac[:, 1, 6] = c * sx - s * sy
    return pts, jac


def _intersect_jac(p1, j1, p2, j2, a, ja, b, jb):
    d = p2 - p1
    jd = j2 - j1
    e = b - a
    je = jb - ja
    m = a - p1
    jm = ja - j1
    num = e[0] * m[1] - e[1] * m[0]
    den = e[0] * d[1] - e[1] * d[0]
    if abs(den) < CLIP_EPS * CLIP_EPS:
        return p1.copy(), j1.copy()
    jnum = je[0] * m[1] + e[0] * jm[1] - je[1] * m[0] - e[1] * jm[0]
    jden = je[0] * d[1] + e[0] * jd[1] - je[1] * d[0] - e[1] * jd[0]
    t = num / den
    jt = (jnum * den - num * jden) / (den * den)
    return p1 + t * d, j1 + t * jd + d[:, None] * jt[None, :]


def _clip_polygon_jac(subject, clip):
    """Sutherland-Hodgman with per-vertex Jacobians; clip must be convex CCW."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, ja = clip[i]
        b, jb = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inputs = output
        output = []
        prev, jprev = inputs[-1]
        prev_side = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0])
        for cur, jcur in inputs:
            cur_side = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0])
            if cur_side >= -CLIP_EPS:
                if prev_side < -CLIP_EPS:
                    output.append(_intersect_jac(prev, jprev, cur, jcur, a, ja, b, jb))
                output.append((cur, jcur))
            elif prev_side >= -CLIP_EPS:
                output.append(_intersect_jac(prev, jprev, cur, jcur, a, ja, b, jb))
            prev, jprev, prev_side = cur, jcur, cur_side
    return output


def _area_jac(verts):
    """Signed shoelace area of [(pt, jac), ...] plus its parameter gradient."""
    if len(verts) < 3:
        return 0.0, np.zeros(7)
    area = 0.0
    grad = np.zeros(7)
    n = len(verts)
    for i in range(n):
        (p, jp) = verts[i]
        (q, jq) = verts[(i + 1) % n]
        area += p[0] * q[1] - q[0] * p[1]
        grad += jp[0] * q[1] + p[0] * jq[1] - jq[0] * p[1] - q[0] * jp[1]
    return 0.5 * area, 0.5 * grad


def _hull_jac(verts):
    """Monotone-chain hull over [(pt, jac)] entries (compare by value)."""
    order = sorted(range(len(verts)), key=lambda i: (verts[i][0][0], verts[i][0][1]))
    pts = []
    for i in order:
        if pts and np.all(verts[i][0] == pts[-1][0]):
            continue
        pts.append(verts[i])
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0][0] - o[0][0]) * (b[0][1] - o[0][1]) - (a[0][1] - o[0][1]) * (
            b[0][0] - o[0][0]
        )

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
    return lower[:-1] + upper[:-1]


def _box_params(box: Box3D) -> np.ndarray:
    return np.array(
        [
            box.center[0], box.center[1], box.center[2],
            box.dims[0], box.dims[1], box.dims[2], box.yaw,
        ]
    )


def giou_3d_with_grad(pred: Box3D, gt: Box3D):
    """3D generalized IoU and its gradient w.r.t. the predicted box params."""
    pp = _box_params(pred)
    pred_pts, pred_jac = _bev_corners_jac(pp)
    gt_pts, gt_jac = _bev_corners_jac(_box_params(gt))
    gt_jac = np.zeros_like(gt_jac)
    subject = [(pred_pts[i], pred_jac[i]) for i in range(4)]
    clip = [(gt_pts[i], gt_jac[i]) for i in range(4)]

    inter_area, d_inter_area = _area_jac(_clip_polygon_jac(subject, clip))
    if inter_area < 0.0:
        inter_area, d_inter_area = 0.0, np.zeros(7)
    hull_area, d_hull_area = _area_jac(_hull_jac(subject + clip))

    p_bot, p_top = pp[2] - pp[5] / 2.0, pp[2] + pp[5] / 2.0
    g_bot = gt.center[2] - gt.dims[2] / 2.0
    g_top = gt.center[2] + gt.dims[2] / 2.0

    d_p_top = np.zeros(7)
    d_p_top[2], d_p_top[5] = 1.0, 0.5
    d_p_bot = np.zeros(7)
    d_p_bot[2], d_p_bot[5] = 1.0, -0.5

    if p_top <= g_top:
        ov_top, d_ov_top = p_top, d_p_top
        sp_top, d_sp_top = g_top, np.zeros(7)
    else:
        ov_top, d_ov_top = g_top, np.zeros(7)
        sp_top, d_sp_top = p_top, d_p_top
    if p_bot >= g_bot:
        ov_bot, d_ov_bot = p_bot, d_p_bot
        sp_bot, d_sp_bot = g_bot, np.zeros(7)
    else:
        ov_bot, d_ov_bot = g_bot, np.zeros(7)
        sp_bot, d_sp_bot = p_bot, d_p_bot

    z_ov = ov_top - ov_bot
    d_z_ov = d_ov_top - d_ov_bot
    if z_ov <= 0.0:
        z_ov, d_z_ov = 0.0, np.zeros(7)
    z_span = sp_top - sp_bot
    d_z_span = d_sp_top - d_sp_bot

    inter_vol = inter_area * z_ov
    d_inter_vol = d_inter_area * z_ov + inter_area * d_z_ov
    vol_p = pp[3] * pp[4] * pp[5]
    d_vol_p = np.zeros(7)
    d_vol_p[3] = pp[4] * pp[5]
    d_vol_p[4] = pp[3] * pp[5]
    d_vol_p[5] = pp[3] * pp[4]
    union = vol_p + gt.volume - inter_vol
    d_union = d_vol_p - d_inter_vol
    hull_vol = hull_area * z_span
    d_hull_vol = d_hull_area * z_span + hull_area * d_z_span

    if union <= 0.0 or hull_vol <= 0.0:
        return 0.0, np.zeros(7)
    giou = inter_vol / union - (hull_vol - union) / hull_vol
    d_giou = (d_inter_vol * union - inter_vol * d_union) / union**2 - (
        (d_hull_vol - d_union) * hull_vol - (hull_vol - union) * d_hull_vol
    ) / hull_vol**2
    return float(giou), d_giou


def giou_loss(pred: Box3D, gt: Box3D):
    """1 - GIoU_3d(pred, gt) and its gradient w.r.t. pred's 7 parameters."""
    giou, d_giou = giou_3d_with_grad(pred, gt)
    return 1.0 - giou, -d_giou


# ---------------------------------------------------------------------------
# batched objective over prepared frames
#
# Second-stage RoIs are the decoded first-stage boxes, frozen when the batch
# is prepared; total_loss is therefore a pure function of the parameters and
# its gradients are finite-difference consistent.


@dataclass
class RoiTarget:
    """One RoI with its assigned classification/regression targets."""

    roi: Box3D
    class_id: int
    label: int  # 1 positive, 0 negative
    target_residual: np.ndarray = None  # (7,), positives only
    gt_box: Box3D = None  # positives only


@dataclass
class TrainingExample:
    """Parameter-independent inputs for one frame's loss evaluation."""

    voxel_coords: np.ndarray
    voxel_stats: np.ndarray
    stage1: list
    stage2: list
    cloud: object  # cropped PseudoCloud


def _roi_counts(examples, stage: str):
    total = sum(len(getattr(ex, stage)) for ex in examples)
    pos = sum(
        sum(1 for rt in getattr(ex, stage) if rt.label == 1) for ex in examples
    )
    return total, pos


def total_loss(examples, params, cfg, lambdas=DEFAULT_LAMBDAS, with_grads=True):
    """Weighted objective over a prepared batch.

    Returns (LossBreakdown, grads) where grads maps parameter names (as in
    PipelineParams.named_params) to accumulated gradient arrays; pass
    with_grads=False to skip every backward pass (grads comes back empty).
    RoIs are processed as matrices per frame; the RPN term is identically
    zero under the oracle-proposal stand-in.
    """
    from .detector import (
        SOURCE_PSEUDO,
        VoxelGrid,
        decode_box_residual,
        decode_jacobian,
        pool_roi,
        pool_roi_backward,
        pseudo_feature_grid,
        pseudo_grid_backward,
    )
    from .hpr import hpr_encode, hpr_encode_backward

    lam1, lam2, lam3 = lambdas
    g = cfg.pool_g
    n1, n1_pos = _roi_counts(examples, "stage1")
    n2, n2_pos = _roi_counts(examples, "stage2")
    w1_cls = 1.0 / max(1, n1)
    w1_reg = 1.0 / max(1, n1_pos)
    w2_cls = 1.0 / max(1, n2)
    w2_reg = 1.0 / max(1, n2_pos)

    sums = {"s1_cls": 0.0, "s1_reg": 0.0, "al_cls": 0.0, "al_reg": 0.0,
            "ac_cls": 0.0, "ac_reg": 0.0, "f_cls": 0.0, "f_reg": 0.0, "f_giou": 0.0}
    grads: dict = {}

    def pool_block(grid, targets, source):
        caches = []
        block = np.zeros((len(targets), g * g * g * grid.feat_width))
        for i, rt in enumerate(targets):
            f, cache = pool_roi(grid, rt.roi, g, source)
            block[i] = f.vec
            caches.append(cache)
        return block, caches

    def cls_pass(logits, targets, key, weight):
        """Focal loss on sigmoid logits; returns upstream logit gradients."""
        probs = sigmoid(logits[:, 0])
        labels = np.array([rt.label for rt in targets], dtype=np.float64)
        loss, d_p = focal_loss(probs, labels)
        sums[key] += float(loss.sum())
        return (d_p * probs * (1.0 - probs) * weight)[:, None]

    def reg_pass(residuals, targets, key, weight):
        """Smooth-L1 on positives; returns upstream residual gradients."""
        d_res = np.zeros_like(residuals)
        for i, rt in enumerate(targets):
            if rt.label != 1:
                continue
            loss, d_diff = smooth_l1(residuals[i] - rt.target_residual)
            sums[key] += float(loss.sum())
            d_res[i] = d_diff * weight
        return d_res

    for ex in examples:
        vox_feats, vox_cache = params.vox_mlp.forward(ex.voxel_stats)
        grid_l = VoxelGrid(cfg.voxel, ex.voxel_coords, vox_feats)

        f1, pool1_caches = pool_block(grid_l, ex.stage1, "lidar")
        res1, reg1_cache = params.heads1.reg.forward(f1)
        log1, cls1_cache = params.heads1.cls.forward(f1)

        encoded, hpr_cache = hpr_encode(ex.cloud, cfg.hpr, params.hpr)
        grid_c, pg_cache = pseudo_feature_grid(ex.cloud.xyz, encoded, cfg.pseudo_voxel)

        fc, poolc_caches = pool_block(grid_c, ex.stage2, SOURCE_PSEUDO)
        fl, pooll_caches = pool_block(grid_l, ex.stage2, "lidar")
        joint = np.concatenate([fc, fl], axis=1)
        fused, fus_cache = params.fusion.forward(joint)
        res2, reg2_cache = params.heads2.reg.forward(fused)
        log2, cls2_cache = params.heads2.cls.forward(fused)
        res_al, regal_cache = params.aux_lidar.reg.forward(fl)
        log_al, clsal_cache = params.aux_lidar.cls.forward(fl)
        res_ac, regac_cache = params.aux_pseudo.reg.forward(fc)
        log_ac, clsac_cache = params.aux_pseudo.cls.forward(fc)

        d_log1 = cls_pass(log1, ex.stage1, "s1_cls", lam1 * w1_cls)
        d_res1 = reg_pass(res1, ex.stage1, "s1_reg", lam1 * w1_reg)
        d_log2 = cls_pass(log2, ex.stage2, "f_cls", lam3 * w2_cls)
        d_res2 = reg_pass(res2, ex.stage2, "f_reg", lam3 * w2_reg)
        d_logal = cls_pass(log_al, ex.stage2, "al_cls", lam2 * w2_cls)
        d_resal = reg_pass(res_al, ex.stage2, "al_reg", lam2 * w2_reg)
        d_logac = cls_pass(log_ac, ex.stage2, "ac_cls", lam2 * w2_cls)
        d_resac = reg_pass(res_ac, ex.stage2, "ac_reg", lam2 * w2_reg)

        # GIoU on the decoded fused boxes, positives only
        for i, rt in enumerate(ex.stage2):
            if rt.label != 1:
                continue
            decoded = decode_box_residual(res2[i], rt.roi)
            loss_g, d_box = giou_loss(decoded, rt.gt_box)
            sums["f_giou"] += loss_g
            d_res2[i] += d_box * decode_jacobian(res2[i], rt.roi) * (lam3 * w2_reg)

        if not with_grads:
            continue

        d_f1 = params.heads1.cls.backward(cls1_cache, d_log1, grads, "heads1.cls")
        d_f1 += params.heads1.reg.backward(reg1_cache, d_res1, grads, "heads1.reg")
        d_grid_l = np.zeros_like(vox_feats)
        for i, cache in enumerate(pool1_caches):
            d_grid_l += pool_roi_backward(cache, d_f1[i], len(grid_l), grid_l.feat_width)

        d_fused = params.heads2.cls.backward(cls2_cache, d_log2, grads, "heads2.cls")
        d_fused += params.heads2.reg.backward(reg2_cache, d_res2, grads, "heads2.reg")
        d_joint = params.fusion.backward(fus_cache, d_fused, grads, "fusion")
        d_fc = d_joint[:, : fc.shape[1]].copy()
        d_fl = d_joint[:, fc.shape[1] :].copy()
        d_fl += params.aux_lidar.cls.backward(clsal_cache, d_logal, grads, "aux_lidar.cls")
        d_fl += params.aux_lidar.reg.backward(regal_cache, d_resal, grads, "aux_lidar.reg")
        d_fc += params.aux_pseudo.cls.backward(clsac_cache, d_logac, grads, "aux_pseudo.cls")
        d_fc += params.aux_pseudo.reg.backward(regac_cache, d_resac, grads, "aux_pseudo.reg")

        d_grid_c = np.zeros_like(grid_c.feats)
        for i, cache in enumerate(poolc_caches):
            d_grid_c += pool_roi_backward(cache, d_fc[i], len(grid_c), grid_c.feat_width)
        for i, cache in enumerate(pooll_caches):
            d_grid_l += pool_roi_backward(cache, d_fl[i], len(grid_l), grid_l.feat_width)

        d_encoded = pseudo_grid_backward(pg_cache, d_grid_c, len(ex.cloud))
        hpr_encode_backward(
            len(ex.cloud), cfg.hpr, params.hpr, hpr_cache, d_encoded, grads
        )
        if len(ex.voxel_stats):
            params.vox_mlp.backward(vox_cache, d_grid_l, grads, "vox")

    breakdown = LossBreakdown(
        l_rpn=0.0,
        l_stage1=sums["s1_cls"] * w1_cls + sums["s1_reg"] * w1_reg,
        l_aux_lidar=sums["al_cls"] * w2_cls + sums["al_reg"] * w2_reg,
        l_aux_pseudo=sums["ac_cls"] * w2_cls + sums["ac_reg"] * w2_reg,
        l_fused=sums["f_cls"] * w2_cls + (sums["f_reg"] + sums["f_giou"]) * w2_reg,
        lambdas=tuple(lambdas),
    )
    return breakdown, grads


# ---------------------------------------------------------------------------
# optimizer and finite-difference harness


def sgd_step(params: dict, grads: dict, lr: float):
    """In-place p <- p - lr*g over sorted names; rejects non-finite grads."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
        params[name][...] -= lr * np.asarray(g)
    return params


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_tensor: str
    per_tensor: dict

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(fn, params: dict, analytic: dict, h: float = 1e-5, tensors=None) -> GradCheckReport:
    """Central-difference check of the scalar fn() against analytic gradients.

    Perturbs each parameter element in place; `tensors` restricts the check
    to a subset of names. Relative error uses max(|a|, |fd|, 1e-4) as the
    denominator so near-zero gradients are compared absolutely.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = sorted(tensors) if tensors is not None else sorted(params)
    per_tensor = {}
    worst, worst_name = 0.0, ""
    for name in names:
        p = params[name]
        a = np.asarray(analytic.get(name, np.zeros_like(p)))
        err = 0.0
        flat = p.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn()
            flat[i] = orig - h
            lo = fn()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(fd), 1e-4)
            err = max(err, abs(a_flat[i] - fd) / denom)
        per_tensor[name] = err
        if err >= worst:
            worst, worst_name = err, name
    return GradCheckReport(max_rel_err=worst, worst_tensor=worst_name, per_tensor=per_tensor)
