"""KITTI-protocol average precision in 3D and BEV.

Matching is greedy by descending detection score with one match per ground
truth; ground truths outside the difficulty level under evaluation are
ignored (they neither count as false negatives nor turn their matches into
false positives). AP interpolates precision at 11 or 40 fixed recall
points. Equal scores collapse into a single threshold so results do not
depend on frame or input order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import CAR, CLASS_NAMES, CYCLIST, PEDESTRIAN, Box3D, iou_3d, iou_bev

DIFF_EASY, DIFF_MODERATE, DIFF_HARD, DIFF_IGNORED = 0, 1, 2, 3
DIFFICULTY_NAMES = {DIFF_EASY: "easy", DIFF_MODERATE: "moderate", DIFF_HARD: "hard"}

SPACE_3D = "3d"
SPACE_BEV = "bev"

R11 = "r11"
R40 = "r40"

# KITTI difficulty gates: min 2D height (px), max occlusion, max truncation
_KITTI_GATES = ((40.0, 0, 0.15), (25.0, 1, 0.30), (25.0, 2, 0.50))

# synthetic proxies: (max distance m, min real points) for easy/moderate
_SYNTH_GATES = ((20.0, 50), (40.0, 20))

TP, FP, IGNORED_DET = 1, 0, -1


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(
        default_factory=lambda: {CAR: 0.7, PEDESTRIAN: 0.7, CYCLIST: 0.5}
    )
    space: str = SPACE_3D

    def __post_init__(self):
        for cid, thr in self.iou_thresholds.items():
            if not (0.0 < thr <= 1.0):
                raise ValueError(f"IoU threshold for class {cid} must be in (0, 1]")
        if self.space not in (SPACE_3D, SPACE_BEV):
            raise ValueError(f"space must be {SPACE_3D!r} or {SPACE_BEV!r}")


@dataclass
class GtObject:
    """Ground truth for evaluation: box, class, and difficulty bin."""

    box: Box3D
    class_id: int
    difficulty: int


def assign_difficulty(
    label=None, *, distance: float = None, n_real_points: int = None
) -> int:
    """Difficulty bin from a KITTI label, or from synthetic truth proxies.

    Pass a KittiLabel for the 2D-height/occlusion/truncation convention, or
    distance + n_real_points keywords for the synthetic distance/point-count
    proxies (synthetic truths are never ignored).
    """
    if label is not None:
        height = label.bbox_height
        for level, (min_h, max_occ, max_trunc) in enumerate(_KITTI_GATES):
            if height >= min_h and label.occlusion <= max_occ and label.truncation <= max_trunc:
                return level
        return DIFF_IGNORED
    if distance is None or n_real_points is None:
        raise ValueError("need a label, or distance and n_real_points")
    for level, (max_dist, min_pts) in enumerate(_SYNTH_GATES):
        if distance < max_dist and n_real_points >= min_pts:
            return level
    return DIFF_HARD


def _overlap(space: str):
    return iou_3d if space == SPACE_3D else iou_bev


def match_detections(dets, gt_boxes, iou_thresh: float, space: str, gt_ignored=None):
    """Greedy matching for one frame and class.

    Returns (flags, n_countable_gt, n_unmatched_gt): flags[i] is TP, FP, or
    IGNORED_DET for the i-th detection; ignored ground truths can absorb a
    detection without making it a TP or FP.
    """
    if gt_ignored is None:
        gt_ignored = [False] * len(gt_boxes)
    overlap = _overlap(space)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(gt_boxes)
    flags = [FP] * len(dets)
    for i in order:
        best_j, best_iou = -1, iou_thresh
        best_ign_j, best_ign_iou = -1, iou_thresh
        for j, gt in enumerate(gt_boxes):
            if matched[j]:
                continue
            ov = overlap(dets[i].box, gt)
            if gt_ignored[j]:
                if ov >= best_ign_iou:
                    best_ign_j, best_ign_iou = j, ov
            elif ov >= best_iou:
                best_j, best_iou = j, ov
        if best_j >= 0:
            matched[best_j] = True
            flags[i] = TP
        elif best_ign_j >= 0:
            matched[best_ign_j] = True
            flags[i] = IGNORED_DET
    n_countable = sum(1 for ign in gt_ignored if not ign)
    n_unmatched = sum(
        1 for j in range(len(gt_boxes)) if not gt_ignored[j] and not matched[j]
    )
    return flags, n_countable, n_unmatched


@dataclass
class PrCurve:
    """Precision/recall samples from a score sweep, plus final counts."""

    recalls: np.ndarray
    precisions: np.ndarray
    n_tp: int
    n_fp: int
    n_fn: int


def pr_curve(scores, flags, n_gt: int) -> PrCurve:
    """Sweep thresholds over distinct scores (ignored detections dropped)."""
    pairs = [(s, f) for s, f in zip(scores, flags) if f != IGNORED_DET]
    if not pairs or n_gt == 0:
        return PrCurve(np.zeros(0), np.zeros(0), 0, 0, n_gt)
    arr = np.array(sorted(pairs, key=lambda p: -p[0]))
    s_sorted, f_sorted = arr[:, 0], arr[:, 1]
    tp_cum = np.cumsum(f_sorted == TP)
    fp_cum = np.cumsum(f_sorted == FP)
    # keep the last entry of each equal-score run
    last = np.nonzero(np.diff(s_sorted, append=-np.inf) != 0)[0]
    tp_c, fp_c = tp_cum[last], fp_cum[last]
    recalls = tp_c / n_gt
    precisions = tp_c / np.maximum(tp_c + fp_c, 1)
    n_tp = int(tp_cum[-1])
    return PrCurve(recalls, precisions, n_tp, int(fp_cum[-1]), n_gt - n_tp)


def average_precision(curve: PrCurve, mode: str = R40) -> float:
    """Interpolated AP over 11 or 40 fixed recall points."""
    if mode == R11:
        points = np.linspace(0.0, 1.0, 11)
    elif mode == R40:
        points = np.arange(1, 41) / 40.0
    else:
        raise ValueError(f"unknown recall mode {mode!r}")
    if len(curve.recalls) == 0:
        return 0.0
    total = 0.0
    for r in points:
        reachable = curve.recalls >= r - 1e-12
        total += float(curve.precisions[reachable].max()) if reachable.any() else 0.0
    return total / len(points)


def evaluate(frame_dets: dict, frame_gts: dict, cfg: EvalConfig) -> "EvalResult":
    """AP per class and difficulty aggregated over frames.

    `frame_dets` maps frame id -> list[Detection]; `frame_gts` maps frame
    id -> list[GtObject]. The two key sets must agree.
    """
    missing = sorted(set(frame_dets) ^ set(frame_gts))
    if missing:
        raise ValueError(f"mismatched frame ids: {missing}")
    frame_ids = sorted(frame_dets)
    table = {}
    for cid in sorted(cfg.iou_thresholds):
        thr = cfg.iou_thresholds[cid]
        per_diff = {}
        for diff in (DIFF_EASY, DIFF_MODERATE, DIFF_HARD):
            scores, flags, n_gt = [], [], 0
            for fid in frame_ids:
                dets = [d for d in frame_dets[fid] if d.class_id == cid]
                gts = [g for g in frame_gts[fid] if g.class_id == cid]
                gt_ignored = [g.difficulty > diff for g in gts]
                f, n_countable, _ = match_detections(
                    dets, [g.box for g in gts], thr, cfg.space, gt_ignored
                )
                scores.extend(d.score for d in dets)
                flags.extend(f)
                n_gt += n_countable
            curve = pr_curve(scores, flags, n_gt)
            per_diff[diff] = {
                R11: average_precision(curve, R11),
                R40: average_precision(curve, R40),
                "n_gt": n_gt,
                "n_tp": curve.n_tp,
                "n_fp": curve.n_fp,
            }
        table[cid] = per_diff
    return EvalResult(table=table, space=cfg.space)


@dataclass
class EvalResult:
    table: dict  # class_id -> difficulty -> {r11, r40, counts}
    space: str

    def ap(self, class_id: int, difficulty: int, mode: str = R40) -> float:
        return self.table[class_id][difficulty][mode]

    def class_map(self, class_id: int, mode: str = R40) -> float:
        vals = [self.table[class_id][d][mode] for d in sorted(self.table[class_id])]
        return float(np.mean(vals))

    def overall_map(self, mode: str = R40) -> float:
        return float(np.mean([self.class_map(cid, mode) for cid in sorted(self.table)]))

    def to_json_dict(self) -> dict:
        out = {"space": self.space, "classes": {}, "map": {}}
        for cid, per_diff in sorted(self.table.items()):
            cname = CLASS_NAMES.get(cid, str(cid))
            out["classes"][cname] = {
                DIFFICULTY_NAMES[d]: {
                    "ap_r11": per_diff[d][R11],
                    "ap_r40": per_diff[d][R40],
                    "n_gt": per_diff[d]["n_gt"],
                    "n_tp": per_diff[d]["n_tp"],
                    "n_fp": per_diff[d]["n_fp"],
                }
                for d in sorted(per_diff)
            }
            out["map"][cname] = {R11: self.class_map(cid, R11), R40: self.class_map(cid, R40)}
        out["map"]["overall"] = {R11: self.overall_map(R11), R40: self.overall_map(R40)}
        return out

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["space", "class", "difficulty", "ap_r11", "ap_r40", "n_gt", "n_tp", "n_fp"]
            )
            for cid, per_diff in sorted(self.table.items()):
                for d in sorted(per_diff):
                    row = per_diff[d]
                    writer.writerow(
                        [
                            self.space,
                            CLASS_NAMES.get(cid, str(cid)),
                            DIFFICULTY_NAMES[d],
                            f"{row[R11]:.6f}",
                            f"{row[R40]:.6f}",
                            row["n_gt"],
                            row["n_tp"],
                            row["n_fp"],
                        ]
                    )
