"""Command-line entry point: ``handsplat <command> [flags]``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import features as F
from .config import ExperimentConfig
from .hand_model import PoseParams, pose_mesh, write_obj
from .io import (camera_from_dict, load_camera, load_checkpoint, load_cloud, load_pose, load_poses, load_scene,
                 read_ppm, save_checkpoint, save_cloud, save_labels, write_ppm)
from .pipeline import AvatarTemplate, PointState, current_cloud, forward, frame_inputs, refine_points
from .rasterizer import render

log = logging.getLogger("handsplat")


# ---------------------------------------------------------------- model files

def save_model(path, weights: dict, identities: np.ndarray | None, tpl: AvatarTemplate, cfg: ExperimentConfig) -> None:
    blocks = dict(weights)
    if identities is not None:
        for s in range(len(identities)):
            blocks[f"identity.s{s + 1}"] = identities[s]
    p = tpl.points
    blocks.update({"points.canonical": p.canonical, "points.uv": p.uv, "points.side": p.side.astype(float),
                   "points.vertex_id": p.vertex_id.astype(float), "points.weights": p.weights,
                   "meta.level": np.array([tpl.level]), "meta.detection_level": np.array([tpl.detection_level])})
    save_checkpoint(path, blocks)


def load_model(path, cfg: ExperimentConfig):
    blocks = load_checkpoint(path)
    ids = sorted((k for k in blocks if k.startswith("identity.s")), key=lambda k: int(k.split("s")[-1]))
    identities = np.stack([blocks[k] for k in ids]) if ids else None
    level = int(blocks["meta.level"][0]) if "meta.level" in blocks else cfg.coarse_level
    det = int(blocks["meta.detection_level"][0]) if "meta.detection_level" in blocks else min(cfg.detection_level, level)
    ms = next(iter(blocks[k] for k in ids)).shape[-1] if ids else cfg.map_size
    tpl = AvatarTemplate(level=level, detection_level=det, map_size=ms)
    if "points.canonical" in blocks:
        tpl.set_points(PointState(blocks["points.canonical"], blocks["points.uv"], blocks["points.side"].astype(np.int64),
                                  blocks["points.vertex_id"].astype(np.int64), blocks["points.weights"]))
    weights = {k: v for k, v in blocks.items() if not k.startswith(("identity.", "points.", "meta."))}
    return weights, identities, tpl


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    cfg.seed = args.seed
    cfg.validate()
    return cfg


def _bg(text: str):
    vals = [float(x) for x in text.split(",")]
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("background needs 1 or 3 comma-separated values")
    return tuple(vals)


def _identity_from(args, identities):
    """--identity is either a fitted-identity file or a 1-based subject index into the checkpoint."""
    if args.identity is None or args.identity.isdigit():
        s = int(args.identity or 1)
        if identities is None or not 1 <= s <= len(identities):
            raise SystemExit(f"subject {s} not in checkpoint")
        return identities[s - 1], None, None
    fit = load_checkpoint(args.identity)
    return fit["identity"], fit.get("delta_t"), (fit.get("calib.log_gain"), fit.get("calib.bias"))


def _render_avatar(tpl, weights, identity, delta_t, calib, pose, cam, W, H, bg, cfg):
    from .optimize import ColorCalibration
    fr = frame_inputs(tpl, pose, cam, cfg.detection())
    res = forward(tpl, weights, identity, fr, delta_t=delta_t, bg=bg, H=H, W=W, offset_radius=cfg.offset_radius)
    rgb, mask = res.rgb.value, res.mask.value
    if calib is not None and calib[0] is not None:
        rgb = ColorCalibration(calib[0], calib[1]).apply(rgb, mask, bg)
    return rgb, mask, res


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .dataset import gen_synthetic_dataset
    cfg = _config(args)
    cfg.width, cfg.height = args.width, args.height
    out = gen_synthetic_dataset(cfg, args.out, args.subjects, args.poses, args.seed, args.cameras)
    print(f"wrote dataset to {out}")
    return 0


def _load_samples(data_dir: Path, tpl, cfg, subjects: int | None):
    from .optimize import TrainSample
    samples = []
    sdirs = sorted((data_dir / "subjects").glob("s*"), key=lambda p: int(p.name[1:]))
    if subjects:
        sdirs = sdirs[:subjects]
    for sdir in sdirs:
        scene = load_scene(sdir / "scene.txt")
        for f in scene["frames"]:
            pose = PoseParams.from_dict(f["pose"])
            cam = camera_from_dict(f["camera"])
            target = read_ppm(sdir / f["image"])
            samples.append(TrainSample(frame_inputs(tpl, pose, cam, cfg.detection()), target, int(scene["subject"])))
    return samples


def cmd_train(args) -> int:
    from .optimize import OptimState, train_stage_one
    cfg = _config(args)
    data = Path(args.data_dir)
    if (data / "config.json").exists() and not args.config:
        cfg = ExperimentConfig.load(data / "config.json")
        cfg.seed = args.seed
    cfg.epochs = args.epochs
    rng = np.random.default_rng(args.seed)
    weights = F.init_weights(cfg.network_shape(), rng)
    n_subj = len(list((data / "subjects").glob("s*")))
    if args.subjects:
        n_subj = min(n_subj, args.subjects)
    identities = np.zeros((n_subj, 2 * cfg.C, cfg.map_size, cfg.map_size))
    state = OptimState(lr=args.lr)
    tpl, level = None, None
    trace = []
    for epoch in range(args.epochs):
        lv = cfg.level_for_epoch(epoch)
        if lv != level:
            tpl = AvatarTemplate(level=lv, detection_level=min(cfg.detection_level, lv), map_size=cfg.map_size)
            samples = _load_samples(data, tpl, cfg, n_subj)
            level = lv
        steps = args.steps_per_epoch or len(samples)
        tr = train_stage_one(samples, tpl, weights, identities, steps, args.lr, seed=args.seed + epoch,
                             lw=cfg.loss_weights(), use_attention=not args.no_attention, bg=cfg.background,
                             state=state)
        trace.extend(tr)
        print(f"epoch {epoch} level {lv} points {len(tpl.points)} loss {np.mean([t['total'] for t in tr]):.5f}")
        if epoch + 1 < args.epochs and cfg.level_for_epoch(epoch + 1) == lv:
            s0 = samples[0]
            res = forward(tpl, weights, identities[s0.subject - 1], s0.frame, bg=cfg.background,
                          H=s0.target.shape[0], W=s0.target.shape[1])
            refine_points(tpl, res, cfg.refinement())
            samples = _load_samples(data, tpl, cfg, n_subj)
    save_model(args.checkpoint_out, weights, identities, tpl, cfg)
    if args.trace_out:
        from .optimize import write_trace_csv
        write_trace_csv(args.trace_out, trace)
    print(f"saved checkpoint {args.checkpoint_out}")
    return 0


def cmd_fit(args) -> int:
    from .optimize import fit_one_shot, write_trace_csv
    cfg = _config(args)
    weights, _, tpl = load_model(args.checkpoint, cfg)
    ref = read_ppm(args.ref_image)
    mask = read_ppm(args.ref_mask)[..., 0] if args.ref_mask else None
    pose = load_pose(args.pose_file)
    cam, W, H = load_camera(args.camera_file)
    if ref.shape[:2] != (H, W):
        raise SystemExit("reference image size does not match the camera file")
    fr = frame_inputs(tpl, pose, cam, cfg.detection())
    res = fit_one_shot(tpl, weights, fr, ref, mask, steps=args.steps, lr=args.lr, lw=cfg.loss_weights(),
                       bg=cfg.background)
    save_checkpoint(args.out_identity, {"identity": res.identity, "delta_t": res.delta_t,
                                        "calib.log_gain": res.calibration.log_gain,
                                        "calib.bias": res.calibration.bias})
    if args.trace_out:
        write_trace_csv(args.trace_out, res.report.trace)
    r = res.report
    print(f"fit: {r.steps} steps, l1 {r.initial['l1']:.5f} -> {r.final['l1']:.5f}, "
          f"PSNR {r.final_psnr:.2f} dB, {r.wall_time:.1f} s")
    return 0


def cmd_render(args) -> int:
    cfg = _config(args)
    bg = args.bg
    if args.cloud_file:
        cam, W, H = load_camera(args.camera_file)
        W, H = args.width or W, args.height or H
        img = render(load_cloud(args.cloud_file), cam, bg, H, W, workers=args.workers)
        rgb = img.rgb
    else:
        if not (args.checkpoint and args.pose_file):
            raise SystemExit("render needs --cloud-file or --checkpoint with --pose-file")
        weights, identities, tpl = load_model(args.checkpoint, cfg)
        identity, dt, calib = _identity_from(args, identities)
        cam, W, H = load_camera(args.camera_file)
        W, H = args.width or W, args.height or H
        rgb, _, res = _render_avatar(tpl, weights, identity, dt, calib, load_pose(args.pose_file), cam, W, H, bg, cfg)
        if args.save_cloud:
            save_cloud(args.save_cloud, current_cloud(res, tpl))
    write_ppm(args.out, rgb)
    print(f"wrote {args.out}")
    return 0


def cmd_animate(args) -> int:
    cfg = _config(args)
    weights, identities, tpl = load_model(args.checkpoint, cfg)
    identity, dt, calib = _identity_from(args, identities)
    cam, W, H = load_camera(args.camera_file)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    poses = load_poses(args.poses_file)
    for i, pose in enumerate(poses):
        rgb, _, _ = _render_avatar(tpl, weights, identity, dt, calib, pose, cam, W, H, args.bg, cfg)
        write_ppm(out / f"frame_{i:04d}.ppm", rgb)
    print(f"wrote {len(poses)} frames to {out}")
    return 0


def cmd_detect(args) -> int:
    cfg = _config(args)
    if args.n_canonical:
        cfg.n_canonical = cfg.n_posed = args.n_canonical
    if args.threshold is not None:
        cfg.threshold = args.threshold
    tpl = AvatarTemplate(level=args.level, detection_level=args.level)
    if args.pose_file:
        pose = load_pose(args.pose_file)
    else:
        scene = load_scene(args.scene)
        pose = PoseParams.from_dict(scene["frames"][args.frame]["pose"])
    labels = tpl.detect(pose, cfg.detection())
    save_labels(args.out, labels)
    if args.obj:
        posed = pose_mesh(tpl.mesh, tpl.rig, pose)
        colors = np.where(labels.flags[:, None] == 1, [1.0, 0.1, 0.1], [0.7, 0.7, 0.7])
        write_obj(args.obj, posed, colors)
    c = labels.counts
    print(f"interacting points: {c['total']} (left {c['left']}, right {c['right']}, "
          f"cross-hand {c['cross_hand']}) of {len(labels)}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(range(args.seed, args.seed + args.seeds), verbose=args.verbose)
    worst = 0.0
    ok = True
    for r in results:
        tol = 1e-3 if r.name.startswith("pipeline") else 1e-4
        ok &= r.max_rel_err < tol and r.n_checked > 0
        worst = max(worst, r.max_rel_err if tol == 1e-4 else 0.0)
        print(f"{r.name:28s} max rel err {r.max_rel_err:.3e}  ({r.n_checked} probes) {'ok' if r.max_rel_err < tol else 'FAIL'}")
    print(f"max rel err {worst:.3e}")
    return 0 if ok else 1


def _bench_cloud(n: int, rng):
    from .gaussians import GaussianCloud
    means = rng.normal(0.0, 0.05, (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(means, np.log(rng.uniform(0.001, 0.004, (n, 3))), q, rng.uniform(0.1, 0.95, n),
                         rng.uniform(0, 1, (n, 3)), np.full(n, 0.5), np.zeros((n, 2)), np.zeros(n, np.int64),
                         np.arange(n))


def cmd_bench(args) -> int:
    import numba
    from .interaction import DetectionConfig, detect_interactions
    from .rasterizer import look_at
    rng = np.random.default_rng(args.seed)
    dtype = np.float32 if args.precision == "single" else np.float64
    rows = []
    for n in args.gaussians:
        cloud = _bench_cloud(n, rng)
        for size in args.sizes:
            cam = look_at([0, 0, -0.5], [0, 0, 0], up=(0, -1, 0), focal=1.6 * size, width=size, height=size)
            render(cloud, cam, H=size, W=size, dtype=dtype, workers=args.workers)  # warm-up / compile
            times, stages = [], []
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                _, st = render(cloud, cam, H=size, W=size, dtype=dtype, workers=args.workers, return_state=True)
                times.append(1e3 * (time.perf_counter() - t0))
                stages.append(st.timings)
            best = int(np.argmin(times))
            s = stages[best]
            threads = min(args.workers or numba.get_num_threads(), numba.config.NUMBA_NUM_THREADS)
            rows.append(["render", n, f"{size}x{size}", args.precision, threads,
                         f"{times[best]:.2f}", f"{s['project_ms']:.2f}", f"{s['bin_sort_ms']:.2f}", f"{s['raster_ms']:.2f}"])
    for n in args.detect_points:
        pts = rng.normal(0, 0.05, (n, 3))
        posed = pts + rng.normal(0, 0.01, (n, 3))
        cfg = DetectionConfig(min(100, n), min(100, n), 90)
        detect_interactions(pts[:200], posed[:200], DetectionConfig(100, 100, 90) if n >= 200 else cfg)
        t0 = time.perf_counter()
        detect_interactions(pts, posed, cfg)
        rows.append(["detect", n, "-", "double", numba.get_num_threads(), f"{1e3 * (time.perf_counter() - t0):.2f}",
                     "-", "-", "-"])
    header = ["task", "gaussians", "image", "precision", "workers", "wall_ms", "project_ms", "bin_sort_ms", "raster_ms"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out)
    w.writerow(header)
    w.writerows(rows)
    if args.out:
        out.close()
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="handsplat", description="Interaction-aware Gaussian hand avatars.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=0, help="random seed (all commands are deterministic given it)")
        sp.add_argument("--config", default=None, help="experiment config JSON")
        sp.set_defaults(fn=fn)
        return sp

    g = add("gen-data", cmd_gen_data, "render a synthetic multi-subject dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", type=int, default=3)
    g.add_argument("--poses", type=int, default=4)
    g.add_argument("--cameras", type=int, default=4)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)

    t = add("train", cmd_train, "stage-one training of the network and identity maps")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--epochs", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--subjects", type=int, default=None)
    t.add_argument("--steps-per-epoch", type=int, default=None)
    t.add_argument("--no-attention", action="store_true")
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--trace-out", default=None, help="CSV loss trace")

    f = add("fit", cmd_fit, "one-shot fit of a new identity map to a reference image")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--ref-image", required=True)
    f.add_argument("--ref-mask", default=None)
    f.add_argument("--pose-file", required=True)
    f.add_argument("--camera-file", required=True)
    f.add_argument("--steps", type=int, default=50)
    f.add_argument("--lr", type=float, default=1e-2)
    f.add_argument("--out-identity", required=True)
    f.add_argument("--trace-out", default=None, help="CSV loss trace")

    r = add("render", cmd_render, "render a cloud file or an avatar to PPM")
    r.add_argument("--width", type=int, default=None)
    r.add_argument("--height", type=int, default=None)
    r.add_argument("--bg", type=_bg, default=(0.0, 0.0, 0.0))
    r.add_argument("--camera-file", required=True)
    r.add_argument("--cloud-file", default=None)
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--identity", default=None, help="fitted identity file or 1-based subject index")
    r.add_argument("--pose-file", default=None)
    r.add_argument("--save-cloud", default=None, help="also write the predicted cloud (GCLD)")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--out", required=True)

    a = add("animate", cmd_animate, "render a pose sequence to numbered frames")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--identity", default=None)
    a.add_argument("--poses-file", required=True)
    a.add_argument("--camera-file", required=True)
    a.add_argument("--bg", type=_bg, default=(0.0, 0.0, 0.0))
    a.add_argument("--out-dir", required=True)

    d = add("detect", cmd_detect, "label interacting points for a pose")
    d.add_argument("--scene", default=None)
    d.add_argument("--frame", type=int, default=0)
    d.add_argument("--pose-file", default=None)
    d.add_argument("--level", type=int, default=1)
    d.add_argument("--n-canonical", type=int, default=None)
    d.add_argument("--threshold", type=int, default=None)
    d.add_argument("--out", required=True)
    d.add_argument("--obj", default=None, help="colour-coded OBJ of the posed mesh")

    c = add("gradcheck", cmd_gradcheck, "finite-difference check of every analytic gradient")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--verbose", action="store_true")

    b = add("bench", cmd_bench, "time rendering and detection; CSV output")
    b.add_argument("--gaussians", type=int, nargs="+", default=[10000, 100000])
    b.add_argument("--sizes", type=int, nargs="+", default=[256])
    b.add_argument("--detect-points", type=int, nargs="*", default=[5000])
    b.add_argument("--workers", type=int, default=None)
    b.add_argument("--precision", choices=["single", "double"], default="single")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "detect" and not (args.scene or args.pose_file):
        build_parser().error("detect needs --scene or --pose-file")
    return int(args.fn(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
