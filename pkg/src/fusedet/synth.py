"""Seeded synthetic scenes for desk-scale end-to-end runs.

Scenes place class-mixed boxes on a ground plane inside the camera frustum,
sample sparse "real" surface points with inverse-square density falloff,
and z-buffer a clean depth map plus a constant-color-per-surface rgb proxy.
The noise model reproduces the characteristic pseudo-point pathology:
depth smearing past object silhouettes (boundary bleeding), plus Gaussian
range noise and occasional false surfaces.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    CAR,
    CYCLIST,
    PEDESTRIAN,
    Box3D,
    CameraModel,
    box_corners,
    iou_bev,
    point_in_box,
    project_points,
)
from .evaluation import GtObject, assign_difficulty

# nominal (l, w, h) per class
CLASS_DIMS = {
    CAR: (4.0, 1.7, 1.5),
    PEDESTRIAN: (0.9, 0.7, 1.75),
    CYCLIST: (1.8, 0.7, 1.7),
}

GROUND_COLOR = np.array([0.35, 0.35, 0.35])
DEPTH_EDGE_JUMP = 2.0  # m; discontinuity that defines a silhouette
MAX_RENDER_RANGE = 75.0

# rectangular faces as (origin corner, +e1 corner, +e2 corner) indices
_FACES = ((0, 1, 3), (4, 5, 7), (0, 1, 4), (1, 2, 5), (2, 3, 6), (3, 0, 7))


@dataclass
class SceneSpec:
    seed: int = 0
    n_objects_range: tuple = (2, 5)
    class_mix: tuple = (0.6, 0.2, 0.2)
    dist_range: tuple = (5.0, 60.0)
    density: float = 900.0  # surface points ~= density * area / dist^2
    dropout: float = 0.1
    image_w: int = 256
    image_h: int = 80
    fx: float = 120.0
    fy: float = 120.0
    ground_z: float = -1.7
    ground_points: int = 700
    max_obj_points: int = 500

    def __post_init__(self):
        if self.n_objects_range[0] > self.n_objects_range[1]:
            raise ValueError("empty object count range")
        if self.dist_range[0] >= self.dist_range[1]:
            raise ValueError("empty distance range")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class NoiseModel:
    """Depth corruption: sigma(d) = sigma0 + sigma1*d Gaussian range noise,
    silhouette bleeding of the given pixel width/rate/depth magnitude, and
    Poisson-rate false surface patches."""

    sigma0: float = 0.0
    sigma1: float = 0.0
    bleed_width: int = 0
    bleed_rate: float = 0.0
    bleed_depth: float = 0.3
    false_rate: float = 0.0

    def __post_init__(self):
        if self.sigma0 < 0 or self.sigma1 < 0:
            raise ValueError("noise sigmas must be nonnegative")
        if not (0.0 <= self.bleed_rate <= 1.0):
            raise ValueError("bleed rate must be in [0, 1]")


@dataclass
class Scene:
    spec: SceneSpec
    cam: CameraModel
    boxes: list
    class_ids: list
    colors: np.ndarray  # (n_obj, 3)
    points: np.ndarray  # (N, 4) real points
    n_points_per_obj: list
    clean_depth: np.ndarray  # (h, w), 0 invalid
    rgb: np.ndarray  # (h, w, 3)

    def gts(self) -> list:
        out = []
        for box, cid, npts in zip(self.boxes, self.class_ids, self.n_points_per_obj):
            diff = assign_difficulty(
                distance=float(np.linalg.norm(box.center[:2])), n_real_points=npts
            )
            out.append(GtObject(box=box, class_id=cid, difficulty=diff))
        return out


def default_camera(spec: SceneSpec) -> CameraModel:
    rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    center = np.array([0.27, 0.0, -0.08])  # camera center in the LiDAR frame
    return CameraModel(
        fx=spec.fx, fy=spec.fy,
        cx=spec.image_w / 2.0, cy=spec.image_h / 2.0,
        rotation=rot, translation=-rot @ center,
        image_w=spec.image_w, image_h=spec.image_h,
    )


def _box_in_fov(box: Box3D, cam: CameraModel) -> bool:
    uv, depth, valid = project_points(box_corners(box), cam)
    if not valid.all() or depth.min() < 1.0:
        return False
    return bool(
        (uv[:, 0] >= 1).all()
        and (uv[:, 0] <= cam.image_w - 2).all()
        and (uv[:, 1] >= 1).all()
        and (uv[:, 1] <= cam.image_h - 2).all()
    )


def _face_geometry(box: Box3D):
    corners = box_corners(box)
    faces = []
    for i0, i1, i2 in _FACES:
        c0 = corners[i0]
        e1 = corners[i1] - corners[i0]
        e2 = corners[i2] - corners[i0]
        faces.append((c0, e1, e2))
    return faces


def _sample_box_surface(box: Box3D, n: int, rng) -> np.ndarray:
    faces = _face_geometry(box)
    areas = np.array([np.linalg.norm(np.cross(e1, e2)) for _, e1, e2 in faces])
    choice = rng.choice(len(faces), size=n, p=areas / areas.sum())
    r1 = rng.random(n)
    r2 = rng.random(n)
    pts = np.empty((n, 3))
    for k in range(n):
        c0, e1, e2 = faces[choice[k]]
        pts[k] = c0 + r1[k] * e1 + r2[k] * e2
    return pts


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministic scene synthesis from the spec seed."""
    rng = np.random.default_rng([spec.seed, 0xA11CE])
    cam = default_camera(spec)
    n_target = int(rng.integers(spec.n_objects_range[0], spec.n_objects_range[1] + 1))
    mix = np.asarray(spec.class_mix, dtype=np.float64)
    mix = mix / mix.sum()

    boxes, class_ids = [], []
    attempts = 0
    while len(boxes) < n_target and attempts < 300:
        attempts += 1
        cid = int(rng.choice([CAR, PEDESTRIAN, CYCLIST], p=mix))
        dims = np.array(CLASS_DIMS[cid]) * (1.0 + rng.uniform(-0.1, 0.1, size=3))
        dist = rng.uniform(*spec.dist_range)
        azimuth = rng.uniform(-0.55, 0.55)
        center = np.array(
            [
                dist * math.cos(azimuth),
                dist * math.sin(azimuth),
                spec.ground_z + dims[2] / 2.0,
            ]
        )
        box = Box3D(center=center, dims=dims, yaw=rng.uniform(-math.pi, math.pi))
        if not _box_in_fov(box, cam):
            continue
        if any(iou_bev(box, other) > 0.02 for other in boxes):
            continue
        boxes.append(box)
        class_ids.append(cid)

    colors = rng.uniform(0.1, 0.9, size=(len(boxes), 3))

    # sparse "real" points: surface samples with inverse-square falloff
    point_chunks = []
    for box in boxes:
        faces = _face_geometry(box)
        area = sum(np.linalg.norm(np.cross(e1, e2)) for _, e1, e2 in faces)
        dist = float(np.linalg.norm(box.center[:2]))
        n = int(np.clip(spec.density * area / dist**2, 3, spec.max_obj_points))
        pts = _sample_box_surface(box, n, rng)
        keep = rng.random(n) >= spec.dropout
        pts = pts[keep]
        chunk = np.concatenate([pts, np.full((len(pts), 1), 0.5)], axis=1)
        point_chunks.append(chunk)

    n_ground = spec.ground_points
    gx = rng.uniform(2.0, 65.0, size=n_ground)
    gy = rng.uniform(-0.7, 0.7, size=n_ground) * gx
    gpts = np.stack([gx, gy, np.full(n_ground, spec.ground_z)], axis=1)
    gpts = gpts[rng.random(n_ground) >= spec.dropout]
    point_chunks.append(
        np.concatenate([gpts, np.full((len(gpts), 1), 0.3)], axis=1)
    )
    points = (
        np.concatenate(point_chunks, axis=0) if point_chunks else np.zeros((0, 4))
    )

    clean_depth, rgb = _render_clean(spec, cam, boxes, colors)
    n_per_obj = [int(point_in_box(points[:, :3], box).sum()) for box in boxes]
    return Scene(
        spec=spec, cam=cam, boxes=boxes, class_ids=class_ids, colors=colors,
        points=points, n_points_per_obj=n_per_obj,
        clean_depth=clean_depth, rgb=rgb,
    )


def _render_clean(spec: SceneSpec, cam: CameraModel, boxes, colors):
    h, w = spec.image_h, spec.image_w
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs = np.stack(
        [(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=-1
    ).reshape(-1, 3)
    depth = np.full(h * w, np.inf)
    surf = np.full(h * w, -1, dtype=np.int64)

    surfaces = []
    for b, box in enumerate(boxes):
        for c0, e1, e2 in _face_geometry(box):
            surfaces.append((cam.lidar_to_cam(c0), cam.rotation @ e1, cam.rotation @ e2, b))

    for c0, e1, e2, owner in surfaces:
        normal = np.cross(e1, e2)
        denom = dirs @ normal
        cand = np.nonzero(np.abs(denom) > 1e-12)[0]
        t = (c0 @ normal) / denom[cand]
        keep = (t > 0.5) & (t < MAX_RENDER_RANGE)
        cand, t = cand[keep], t[keep]
        x = t[:, None] * dirs[cand] - c0
        s1 = x @ e1 / (e1 @ e1)
        s2 = x @ e2 / (e2 @ e2)
        keep = (s1 >= 0.0) & (s1 <= 1.0) & (s2 >= 0.0) & (s2 <= 1.0)
        cand, t = cand[keep], t[keep]
        win = t < depth[cand]
        depth[cand[win]] = t[win]
        surf[cand[win]] = owner

    # ground plane, clipped to the forward sector in the LiDAR frame
    g0 = cam.lidar_to_cam(np.array([0.0, 0.0, spec.ground_z]))
    gn = cam.rotation @ np.array([0.0, 0.0, 1.0])
    denom = dirs @ gn
    cand = np.nonzero(np.abs(denom) > 1e-12)[0]
    t = (g0 @ gn) / denom[cand]
    keep = (t > 0.5) & (t < MAX_RENDER_RANGE)
    cand, t = cand[keep], t[keep]
    hit_lidar = cam.cam_to_lidar(t[:, None] * dirs[cand])
    keep = (hit_lidar[:, 0] > 1.0) & (np.abs(hit_lidar[:, 1]) < 45.0)
    cand, t = cand[keep], t[keep]
    win = t < depth[cand]
    depth[cand[win]] = t[win]
    surf[cand[win]] = -2

    rgb = np.zeros((h * w, 3))
    rgb[surf == -2] = GROUND_COLOR
    for b in range(len(boxes)):
        rgb[surf == b] = colors[b]
    depth = np.where(np.isfinite(depth), depth, 0.0)
    return depth.reshape(h, w), rgb.reshape(h, w, 3)


def render_depth(scene: Scene, noise: NoiseModel) -> np.ndarray:
    """Clean z-buffer depth with the noise model applied (seeded by the scene)."""
    rng = np.random.default_rng([scene.spec.seed, 0xD0D0])
    depth = scene.clean_depth.copy()
    h, w = depth.shape

    if noise.bleed_width > 0 and noise.bleed_rate > 0:
        valid = depth > 0
        fg_edge = np.zeros((h, w), dtype=bool)
        for dv, du in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            shifted = np.roll(depth, (dv, du), axis=(0, 1))
            svalid = np.roll(valid, (dv, du), axis=(0, 1))
            # a valid pixel whose neighbor is much farther (or missing) sits
            # on a silhouette
            fg_edge |= valid & (
                (~svalid) | (svalid & (shifted - depth > DEPTH_EDGE_JUMP))
            )
        fgd = np.where(fg_edge, depth, np.inf)
        spread = fgd.copy()
        for dv in range(-noise.bleed_width, noise.bleed_width + 1):
            for du in range(-noise.bleed_width, noise.bleed_width + 1):
                if dv == 0 and du == 0:
                    continue
                cand = np.roll(fgd, (dv, du), axis=(0, 1))
                # roll wraps; mask rows/cols that crossed the border
                if dv > 0:
                    cand[:dv, :] = np.inf
                elif dv < 0:
                    cand[dv:, :] = np.inf
                if du > 0:
                    cand[:, :du] = np.inf
                elif du < 0:
                    cand[:, du:] = np.inf
                spread = np.minimum(spread, cand)
        band = np.isfinite(spread) & ~fg_edge
        band &= (~valid) | (depth > spread + DEPTH_EDGE_JUMP)
        chosen = band & (rng.random((h, w)) < noise.bleed_rate)
        depth[chosen] = spread[chosen] + rng.uniform(0.0, noise.bleed_depth, size=int(chosen.sum()))

    valid = depth > 0
    if noise.sigma0 > 0 or noise.sigma1 > 0:
        sigma = noise.sigma0 + noise.sigma1 * depth[valid]
        depth[valid] = np.maximum(depth[valid] + rng.normal(0.0, 1.0, sigma.shape) * sigma, 0.1)

    if noise.false_rate > 0:
        for _ in range(int(rng.poisson(noise.false_rate))):
            size = int(rng.integers(2, 6))
            v0 = int(rng.integers(0, max(1, h - size)))
            u0 = int(rng.integers(0, max(1, w - size)))
            depth[v0 : v0 + size, u0 : u0 + size] = rng.uniform(3.0, 50.0)

    return depth


@dataclass
class ProposalJitter:
    center_sigma: float = 0.3
    dim_sigma: float = 0.08
    yaw_sigma: float = 0.15
    distractor_rate: float = 1.0


def make_proposals(boxes, class_ids, jitter: ProposalJitter, rng, spec: SceneSpec = None):
    """Oracle proposals: jittered ground truth plus random distractors."""
    proposals, classes = [], []
    for box, cid in zip(boxes, class_ids):
        center = box.center + np.array(
            [
                rng.normal(0.0, jitter.center_sigma),
                rng.normal(0.0, jitter.center_sigma),
                rng.normal(0.0, jitter.center_sigma / 2.0),
            ]
        )
        dims = box.dims * np.exp(rng.normal(0.0, jitter.dim_sigma, size=3))
        yaw = box.yaw + rng.normal(0.0, jitter.yaw_sigma)
        proposals.append(Box3D(center=center, dims=dims, yaw=yaw))
        classes.append(cid)
    ground_z = spec.ground_z if spec is not None else -1.7
    n_distract = int(rng.poisson(jitter.distractor_rate * max(1, len(boxes))))
    for _ in range(n_distract):
        cid = int(rng.choice([CAR, PEDESTRIAN, CYCLIST]))
        dims = np.array(CLASS_DIMS[cid]) * (1.0 + rng.uniform(-0.15, 0.15, size=3))
        x = rng.uniform(5.0, 60.0)
        y = rng.uniform(-0.6, 0.6) * x
        proposals.append(
            Box3D(
                center=np.array([x, y, ground_z + dims[2] / 2.0]),
                dims=dims,
                yaw=rng.uniform(-math.pi, math.pi),
            )
        )
        classes.append(cid)
    return proposals, classes


# ---------------------------------------------------------------------------
# benchmark harness


BENCH_MODES = ("stage1", "both_pseudo", "cascade")


@dataclass
class BenchConfig:
    modes: tuple = BENCH_MODES
    alpha: float = 0.5
    nms_iou: float = 0.5
    score_floor: float = 0.05
    eval_space: str = "3d"
    jitter: ProposalJitter = field(default_factory=ProposalJitter)
    crop_margin: float = 0.5


def _pipeline_config(mode: str, cfg: BenchConfig):
    from .cascade import MODE_CASCADE, MODE_STAGE1, PipelineConfig

    if mode == "stage1":
        return PipelineConfig(
            alpha=cfg.alpha, nms_iou=cfg.nms_iou, score_floor=cfg.score_floor,
            mode=MODE_STAGE1,
        )
    if mode == "both_pseudo":
        return PipelineConfig(
            alpha=cfg.alpha, nms_iou=cfg.nms_iou, score_floor=cfg.score_floor,
            mode=MODE_CASCADE, stage1_use_pseudo=True,
        )
    if mode == "cascade":
        return PipelineConfig(
            alpha=cfg.alpha, nms_iou=cfg.nms_iou, score_floor=cfg.score_floor,
            mode=MODE_CASCADE,
        )
    raise ValueError(f"unknown benchmark mode {mode!r}")


def bench_frame(spec: SceneSpec, noise: NoiseModel, jitter: ProposalJitter):
    """Deterministic (FrameInputs, gts) pair for one benchmark scene."""
    from .cascade import FrameInputs

    scene = generate_scene(spec)
    depth = render_depth(scene, noise)
    rng = np.random.default_rng([spec.seed, 0xB0B])
    proposals, classes = make_proposals(
        scene.boxes, scene.class_ids, jitter, rng, scene.spec
    )
    frame = FrameInputs(
        frame_id=f"{spec.seed:06d}",
        lidar=scene.points,
        proposals=proposals,
        proposal_classes=classes,
        cam=scene.cam,
        depth=depth,
        rgb=scene.rgb,
    )
    return frame, scene.gts()


def run_benchmark(specs, noise_grid, params, net_cfg, bench_cfg: BenchConfig, jobs: int = 1):
    """Modes x noise levels comparison table over a fixed scene set."""
    from concurrent.futures import ThreadPoolExecutor

    from .cascade import run_pipeline
    from .evaluation import EvalConfig, evaluate

    rows = []
    for noise_name, noise in noise_grid:
        frames = [bench_frame(spec, noise, bench_cfg.jitter) for spec in specs]
        for mode in bench_cfg.modes:
            pipe_cfg = _pipeline_config(mode, bench_cfg)

            def detect(fr):
                return run_pipeline(fr, params, net_cfg, pipe_cfg)

            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    det_lists = list(pool.map(detect, [f for f, _ in frames]))
            else:
                det_lists = [detect(f) for f, _ in frames]
            frame_dets = {f.frame_id: d for (f, _), d in zip(frames, det_lists)}
            frame_gts = {f.frame_id: g for f, g in frames}
            result = evaluate(
                frame_dets, frame_gts, EvalConfig(space=bench_cfg.eval_space)
            )
            rows.append(
                {
                    "noise": noise_name,
                    "mode": mode,
                    "map_r40": result.overall_map("r40"),
                    "map_r11": result.overall_map("r11"),
                    "per_class_r40": {
                        str(cid): result.class_map(cid, "r40") for cid in sorted(result.table)
                    },
                }
            )
    return BenchReport(rows=rows)


# ---------------------------------------------------------------------------
# on-disk frames (KITTI-format layout shared with real data)


def save_frame(root, frame_id: str, scene: Scene, depth: np.ndarray, proposals, classes):
    """Persist one frame under root/{velodyne,calib,label_2,depth,image_rgb,proposals}."""
    from pathlib import Path

    from . import kitti_io
    from .geometry import CLASS_NAMES

    root = Path(root)
    for sub in ("velodyne", "calib", "label_2", "depth", "image_rgb", "proposals"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    kitti_io.write_velodyne(root / "velodyne" / f"{frame_id}.bin", scene.points)
    kitti_io.write_calib(root / "calib" / f"{frame_id}.txt", scene.cam)
    kitti_io.write_f32grid(root / "depth" / f"{frame_id}.f32grid", depth)
    kitti_io.write_f32grid(root / "image_rgb" / f"{frame_id}.f32grid", scene.rgb)
    labels = [
        kitti_io.lidar_box_to_label(box, scene.cam, CLASS_NAMES[cid])
        for box, cid in zip(scene.boxes, scene.class_ids)
    ]
    kitti_io.write_labels(root / "label_2" / f"{frame_id}.txt", labels)
    plabels = [
        kitti_io.lidar_box_to_label(box, scene.cam, CLASS_NAMES[cid], score=1.0)
        for box, cid in zip(proposals, classes)
    ]
    kitti_io.write_labels(root / "proposals" / f"{frame_id}.txt", plabels)


def list_frames(root) -> list:
    from pathlib import Path

    return sorted(p.stem for p in (Path(root) / "velodyne").glob("*.bin"))


def load_frame(root, frame_id: str):
    """Load one on-disk frame; returns (FrameInputs, gt labels, camera)."""
    from pathlib import Path

    from . import kitti_io
    from .cascade import FrameInputs
    from .geometry import CLASS_IDS

    root = Path(root)
    depth_f32 = root / "depth" / f"{frame_id}.f32grid"
    depth_png = root / "depth" / f"{frame_id}.png"
    depth = None
    if depth_f32.exists():
        depth = kitti_io.read_f32grid(depth_f32, expect_channels=1)
    elif depth_png.exists():
        depth = kitti_io.read_depth_png(depth_png)
    if depth is not None:
        h, w = depth.shape
    else:
        h, w = 375, 1242
    cam = kitti_io.read_calib(root / "calib" / f"{frame_id}.txt", image_w=w, image_h=h)
    points = kitti_io.read_velodyne(root / "velodyne" / f"{frame_id}.bin")
    rgb_path = root / "image_rgb" / f"{frame_id}.f32grid"
    rgb = kitti_io.read_f32grid(rgb_path, expect_channels=3) if rgb_path.exists() else None

    prop_path = root / "proposals" / f"{frame_id}.txt"
    proposals, classes = [], []
    if prop_path.exists():
        for lab in kitti_io.read_labels(prop_path):
            if not lab.evaluable:
                continue
            proposals.append(kitti_io.label_to_lidar_box(lab, cam))
            classes.append(CLASS_IDS.get(lab.class_name, CAR))

    labels = kitti_io.read_labels(root / "label_2" / f"{frame_id}.txt")
    frame = FrameInputs(
        frame_id=frame_id, lidar=points, proposals=proposals,
        proposal_classes=classes, cam=cam, depth=depth, rgb=rgb,
    )
    return frame, labels, cam


@dataclass
class BenchReport:
    rows: list

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["noise", "mode", "map_r40", "map_r11"])
            for row in self.rows:
                writer.writerow(
                    [row["noise"], row["mode"], f"{row['map_r40']:.6f}", f"{row['map_r11']:.6f}"]
                )

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump({"rows": self.rows}, f, indent=2, sort_keys=True)
            f.write("\n")
