"""Command-line entry point for batch experiments.

Subcommands: depth2cloud, synth, run, train, eval, gradcheck, bench.
Options can come from a `key = value` config file (# comments allowed);
explicit command-line flags override file values, and unknown config keys
are rejected. Exit codes: 0 success, 1 usage error, 2 data error.
Logs go to stderr; artifacts go to the declared output directory.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def log(msg: str):
    print(msg, file=sys.stderr)


def parse_config_file(path) -> dict:
    """Flat `key = value` settings; later keys override earlier ones."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    for lineno, ln in enumerate(text.splitlines(), start=1):
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise UsageError(f"{path}:{lineno}: expected `key = value`")
        key, val = ln.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def apply_config(args, config: dict, defaults: dict):
    """Resolve option values: explicit flag > config file > default."""
    unknown = sorted(set(config) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for key, default in defaults.items():
        if getattr(args, key) is not None:
            continue
        if key in config:
            setattr(args, key, _coerce(config[key], default))
        else:
            setattr(args, key, default)
    return args


def _noise_from_args(args):
    from .synth import NoiseModel

    return NoiseModel(
        sigma0=args.sigma0, sigma1=args.sigma1,
        bleed_width=int(args.bleed_width), bleed_rate=args.bleed_rate,
        bleed_depth=args.bleed_depth, false_rate=args.false_rate,
    )


_NOISE_DEFAULTS = {
    "sigma0": 0.02, "sigma1": 0.002, "bleed_width": 2,
    "bleed_rate": 0.5, "bleed_depth": 0.4, "false_rate": 0.5,
}


def _add_noise_options(parser):
    for key in _NOISE_DEFAULTS:
        parser.add_argument(f"--{key.replace('_', '-')}", type=float, default=None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_depth2cloud(args):
    from . import kitti_io
    from .pseudo_cloud import depth_to_pseudo_cloud, write_pseudo_cloud

    depth = kitti_io.read_depth(args.depth)
    h, w = depth.shape
    cam = kitti_io.read_calib(args.calib, image_w=w, image_h=h)
    if args.image:
        rgb = kitti_io.read_f32grid(args.image, expect_channels=3)
        if rgb.shape[:2] != depth.shape:
            raise kitti_io.FormatError(
                f"image {rgb.shape[:2]} and depth {depth.shape} dims differ"
            )
    else:
        rgb = np.full((h, w, 3), 0.5)
    cloud = depth_to_pseudo_cloud(depth, rgb, cam)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_pseudo_cloud(args.out, cloud)
    log(f"wrote {len(cloud)} pseudo points to {args.out}")
    return EXIT_OK


def cmd_synth(args):
    from .synth import (
        ProposalJitter,
        SceneSpec,
        generate_scene,
        make_proposals,
        render_depth,
        save_frame,
    )

    noise = _noise_from_args(args)
    jitter = ProposalJitter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.scenes):
        spec = SceneSpec(seed=args.seed * 1_000_003 + i)
        scene = generate_scene(spec)
        depth = render_depth(scene, noise)
        rng = np.random.default_rng([spec.seed, 0xB0B])
        proposals, classes = make_proposals(
            scene.boxes, scene.class_ids, jitter, rng, scene.spec
        )
        save_frame(out, f"{i:06d}", scene, depth, proposals, classes)
    log(f"wrote {args.scenes} scenes under {out}")
    return EXIT_OK


def _pipe_config(args):
    from .cascade import PipelineConfig

    return PipelineConfig(
        alpha=args.alpha, nms_iou=args.nms_iou, score_floor=args.score_floor,
        mode=args.mode, stage1_use_pseudo=bool(args.stage1_use_pseudo),
    )


def cmd_run(args):
    from . import kitti_io
    from .cascade import run_pipeline
    from .geometry import CLASS_NAMES
    from .model import load_checkpoint
    from .synth import list_frames, load_frame

    params, net_cfg = load_checkpoint(args.checkpoint)
    pipe_cfg = _pipe_config(args)
    frame_ids = list_frames(args.data)
    if not frame_ids:
        raise FileNotFoundError(f"no velodyne frames under {args.data}")
    out = Path(args.out)
    (out / "detections").mkdir(parents=True, exist_ok=True)

    def process(fid):
        frame, _, cam = load_frame(args.data, fid)
        if not frame.proposals:
            return fid, []
        dets = run_pipeline(frame, params, net_cfg, pipe_cfg)
        labels = [
            kitti_io.lidar_box_to_label(
                d.box, cam, CLASS_NAMES[d.class_id], score=d.score
            )
            for d in dets
        ]
        return fid, labels

    jobs = args.jobs or os.cpu_count() or 1
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(process, frame_ids))
    else:
        results = [process(fid) for fid in frame_ids]
    n_dets = 0
    for fid, labels in results:
        kitti_io.write_labels(out / "detections" / f"{fid}.txt", labels)
        n_dets += len(labels)
    log(f"wrote {n_dets} detections over {len(frame_ids)} frames to {out / 'detections'}")
    return EXIT_OK


def cmd_train(args):
    from .model import NetConfig, save_checkpoint
    from .training import TrainConfig, train

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net_cfg = NetConfig()
    cfg = TrainConfig(
        n_scenes=args.scenes, steps=args.steps, lr=args.lr,
        batch_size=args.batch, seed=args.seed,
    )
    result = train(
        cfg, net_cfg, log_path=out / "train_log.csv",
        progress=lambda step, bd: log(f"step {step}: total {bd.total:.4f}"),
    )
    save_checkpoint(out / "checkpoint.bin", result.params, net_cfg)
    drop = 1.0 - result.final_total / result.first_total if result.first_total else 0.0
    log(
        f"loss {result.first_total:.4f} -> {result.final_total:.4f} "
        f"({100 * drop:.1f}% drop); checkpoint at {out / 'checkpoint.bin'}"
    )
    return EXIT_OK


def cmd_eval(args):
    from . import kitti_io
    from .evaluation import (
        DIFF_HARD,
        EvalConfig,
        GtObject,
        assign_difficulty,
        evaluate,
    )
    from .geometry import CLASS_IDS, Detection, point_in_box
    from .synth import list_frames

    data = Path(args.data)
    det_dir = Path(args.detections)
    frame_ids = list_frames(data)
    if not frame_ids:
        raise FileNotFoundError(f"no frames under {data}")

    frame_dets, frame_gts = {}, {}
    for fid in frame_ids:
        depth_path = data / "depth" / f"{fid}.f32grid"
        if depth_path.exists():
            h, w = kitti_io.read_f32grid(depth_path, expect_channels=1).shape
        else:
            h, w = 375, 1242
        cam = kitti_io.read_calib(data / "calib" / f"{fid}.txt", image_w=w, image_h=h)
        points = kitti_io.read_velodyne(data / "velodyne" / f"{fid}.bin")

        gts = []
        for lab in kitti_io.read_labels(data / "label_2" / f"{fid}.txt"):
            if not lab.evaluable or lab.class_name not in CLASS_IDS:
                continue
            box = kitti_io.label_to_lidar_box(lab, cam)
            if args.difficulty == "synthetic":
                diff = assign_difficulty(
                    distance=float(np.linalg.norm(box.center[:2])),
                    n_real_points=int(point_in_box(points[:, :3], box).sum()),
                )
            else:
                diff = assign_difficulty(lab)
            gts.append(GtObject(box=box, class_id=CLASS_IDS[lab.class_name], difficulty=diff))
        frame_gts[fid] = gts

        det_path = det_dir / f"{fid}.txt"
        dets = []
        if det_path.exists():
            for lab in kitti_io.read_labels(det_path):
                if lab.class_name not in CLASS_IDS:
                    continue
                dets.append(
                    Detection(
                        box=kitti_io.label_to_lidar_box(lab, cam),
                        score=lab.score if lab.score is not None else 0.0,
                        class_id=CLASS_IDS[lab.class_name],
                    )
                )
        frame_dets[fid] = dets

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spaces = ["3d", "bev"] if args.space == "both" else [args.space]
    for space in spaces:
        result = evaluate(frame_dets, frame_gts, EvalConfig(space=space))
        result.write_json(out / f"eval_{space}.json")
        result.write_csv(out / f"eval_{space}.csv")
        log(f"{space}: overall mAP R40 {result.overall_map('r40'):.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    entries = run_suite(n_seeds=args.seeds, base_seed=args.seed)
    all_ok = True
    for e in entries:
        status = "PASS" if e.passed else "FAIL"
        log(
            f"[{status}] {e.name}: max rel err {e.max_rel_err:.3e} "
            f"(tol {e.tol:.0e}, worst {e.worst_tensor or '-'}, {e.seconds:.1f}s)"
        )
        all_ok &= e.passed
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as f:
            f.write("op,max_rel_err,tol,passed\n")
            for e in entries:
                f.write(f"{e.name},{e.max_rel_err:.6e},{e.tol:.0e},{e.passed}\n")
    return EXIT_OK if all_ok else EXIT_DATA


def cmd_bench(args):
    from .model import NetConfig, create_params, load_checkpoint
    from .synth import BenchConfig, NoiseModel, SceneSpec, run_benchmark

    if args.checkpoint:
        params, net_cfg = load_checkpoint(args.checkpoint)
    else:
        net_cfg = NetConfig()
        params = create_params(net_cfg, seed=args.seed)
        log("no checkpoint given; benchmarking seeded random parameters")

    specs = [SceneSpec(seed=args.seed * 1_000_003 + i) for i in range(args.scenes)]
    high = _noise_from_args(args)
    noise_grid = [
        ("clean", NoiseModel()),
        ("high_bleed", high),
    ]
    bench_cfg = BenchConfig(alpha=args.alpha, nms_iou=args.nms_iou, score_floor=args.score_floor)
    report = run_benchmark(
        specs, noise_grid, params, net_cfg, bench_cfg, jobs=args.jobs or 1
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "bench.csv")
    report.write_json(out / "bench.json")
    for row in report.rows:
        log(f"{row['noise']:>10} {row['mode']:>12}: mAP R40 {row['map_r40']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def build_parser():
    parser = _Parser(prog="fusedet", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    defaults = {}
    required = {}

    def add(name, fn, configure):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value settings file")
        p.set_defaults(_fn=fn)
        defaults[name], required[name] = configure(p)
        return p

    def conf_depth2cloud(p):
        p.add_argument("--depth", default=None)
        p.add_argument("--calib", default=None)
        p.add_argument("--image", default=None)
        p.add_argument("--out", default=None)
        return {"depth": None, "calib": None, "image": None, "out": None}, ("depth", "calib", "out")

    def conf_synth(p):
        p.add_argument("--out", default=None)
        p.add_argument("--scenes", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        _add_noise_options(p)
        return {"out": None, "scenes": 10, "seed": 0, **_NOISE_DEFAULTS}, ("out",)

    def conf_run(p):
        p.add_argument("--data", default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--mode", choices=["stage1", "stage2", "cascade"], default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--nms-iou", type=float, default=None)
        p.add_argument("--score-floor", type=float, default=None)
        p.add_argument("--stage1-use-pseudo", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        return {
            "data": None, "checkpoint": None, "out": None,
            "mode": "cascade", "alpha": 0.5, "nms_iou": 0.5,
            "score_floor": 0.05, "stage1_use_pseudo": 0, "jobs": 0,
        }, ("data", "checkpoint", "out")

    def conf_train(p):
        p.add_argument("--out", default=None)
        p.add_argument("--scenes", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        return {
            "out": None, "scenes": 500, "steps": 200,
            "lr": 1e-3, "batch": 4, "seed": 0,
        }, ("out",)

    def conf_eval(p):
        p.add_argument("--detections", default=None)
        p.add_argument("--data", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--space", choices=["3d", "bev", "both"], default=None)
        p.add_argument("--difficulty", choices=["kitti", "synthetic"], default=None)
        return {
            "detections": None, "data": None, "out": None,
            "space": "both", "difficulty": "synthetic",
        }, ("detections", "data", "out")

    def conf_gradcheck(p):
        p.add_argument("--seeds", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        return {"seeds": 20, "seed": 0, "out": None}, ()

    def conf_bench(p):
        p.add_argument("--out", default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--scenes", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--nms-iou", type=float, default=None)
        p.add_argument("--score-floor", type=float, default=None)
        p.add_argument("--jobs", type=int, default=None)
        _add_noise_options(p)
        return {
            "out": None, "checkpoint": None, "scenes": 8, "seed": 0,
            "alpha": 0.5, "nms_iou": 0.5, "score_floor": 0.05, "jobs": 1,
            **_NOISE_DEFAULTS,
        }, ("out",)

    add("depth2cloud", cmd_depth2cloud, conf_depth2cloud)
    add("synth", cmd_synth, conf_synth)
    add("run", cmd_run, conf_run)
    add("train", cmd_train, conf_train)
    add("eval", cmd_eval, conf_eval)
    add("gradcheck", cmd_gradcheck, conf_gradcheck)
    add("bench", cmd_bench, conf_bench)
    return parser, defaults, required


def main(argv=None) -> int:
    parser, defaults, required = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        config = parse_config_file(args.config) if args.config else {}
        apply_config(args, config, defaults[args.command])
        for key in required[args.command]:
            if getattr(args, key) is None:
                raise UsageError(f"missing required option --{key.replace('_', '-')}")
        return args._fn(args)
    except UsageError as exc:
        log(f"usage error: {exc}")
        return EXIT_USAGE
    except (FileNotFoundError, OSError, ValueError) as exc:
        log(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
