"""Synthetic multi-subject data rendered by a seeded generator network."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features as F
from .config import ExperimentConfig
from .gaussians import HEAD_SLICES
from .hand_model import PoseParams, rodrigues
from .io import camera_to_dict, save_checkpoint, save_scene, write_ppm
from .pipeline import AvatarTemplate, forward, frame_inputs
from .rasterizer import Camera, look_at

SKIN = np.array([0.80, 0.58, 0.46])
HAND_CENTRE = np.array([0.0, 0.03, 0.0])
# flexion axis for fingers lying along +y with palms facing -z
FLEX_AXIS = np.array([1.0, 0.0, 0.0])


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def generator_weights(shape: F.NetworkShape, seed: int) -> dict:
    """Teacher network: random init with a skin-tone colour bias and fairly opaque splats."""
    rng = np.random.default_rng(seed)
    w = F.init_weights(shape, rng)
    b = w["head.b2"]
    b[HEAD_SLICES["color"]] = _logit(SKIN)
    b[HEAD_SLICES["opacity"]] = 1.0
    # stronger texture pathway so identities differ visibly
    w["tex.w3"] *= 3.0
    w["head.w2"] *= 4.0
    return w


def random_identity(shape: F.NetworkShape, rng: np.random.Generator, coarse: int = 8, amplitude: float = 1.5) -> np.ndarray:
    """Smooth random (2C, H, W) identity map: coarse noise, bilinearly upsampled."""
    ms = shape.map_size
    low = rng.normal(0.0, amplitude, (2 * shape.C, coarse, coarse))
    ys, xs = np.meshgrid((np.arange(ms) + 0.5) / ms, (np.arange(ms) + 0.5) / ms, indexing="ij")
    uv = np.stack([xs.ravel(), ys.ravel()], axis=1)
    interp = F.bilinear_matrix(uv, coarse, coarse)
    rows = low.transpose(1, 2, 0).reshape(coarse * coarse, -1)
    return (interp @ rows).reshape(ms, ms, -1).transpose(2, 0, 1).copy()


def _curl(pose: PoseParams, hand: int, finger_angles: np.ndarray, rig_finger: np.ndarray) -> None:
    theta = pose.theta[hand].reshape(16, 3)
    for j in range(1, 16):
        a = finger_angles[rig_finger[j]]
        theta[j] = -a * FLEX_AXIS
    pose.theta[hand] = theta.ravel()


def random_pose(rng: np.random.Generator, rig, kind: str = "free") -> PoseParams:
    """kinds: ``free`` (apart, mild curl), ``touch`` (fingertips meet), ``cross`` (fingers overlap)."""
    pose = PoseParams.zeros()
    fingers = rig.finger[:16]
    for h in range(2):
        _curl(pose, h, rng.uniform(0.0, 0.35, 5), fingers)
        pose.beta[h] = rng.uniform(-1.0, 1.0, 10)
    if kind == "free":
        pose.root_rot = rng.normal(0.0, 0.08, (2, 3))
        pose.root_trans = rng.normal(0.0, 0.01, (2, 3))
    elif kind == "touch":
        d = rng.uniform(0.105, 0.125)
        pose.root_trans[0] = [d, 0.0, 0.0]
        pose.root_trans[1] = [-d, 0.0, 0.0]
        pose.root_rot = rng.normal(0.0, 0.05, (2, 3))
    elif kind == "cross":
        ang = rng.uniform(0.35, 0.6)
        pose.root_rot[0] = [0.0, 0.0, -ang]
        pose.root_rot[1] = [0.0, 0.0, ang]
        # rotate each hand about the origin, then slide it towards the middle
        for h, sgn in ((0, 1.0), (1, -1.0)):
            wrist = np.array([-sgn * 0.15, -0.07, 0.0])
            moved = rodrigues(pose.root_rot[h]) @ wrist
            target = np.array([-sgn * rng.uniform(0.06, 0.08), -0.07, (0.012 if h else -0.012)])
            pose.root_trans[h] = target - moved
    else:
        raise ValueError(f"unknown pose kind {kind!r}")
    return pose


def camera_ring(cfg: ExperimentConfig, n: int = 4, distance: float = 0.6) -> list[Camera]:
    """Cameras around the hands, alternating palm-side and back-side views."""
    cams = []
    for i in range(n):
        az = 2 * np.pi * i / n + 0.3
        eye = HAND_CENTRE + distance * np.array([0.45 * np.sin(az), 0.25 * np.cos(az), -1.0 if i % 2 == 0 else 1.0])
        eye = HAND_CENTRE + distance * (eye - HAND_CENTRE) / np.linalg.norm(eye - HAND_CENTRE)
        cams.append(look_at(eye, HAND_CENTRE, up=(0.0, -1.0, 0.0), focal=cfg.focal * cfg.width / 64.0,
                            width=cfg.width, height=cfg.height))
    return cams


@dataclass
class SyntheticFrame:
    subject: int
    pose: PoseParams
    camera: Camera
    kind: str
    image: np.ndarray
    mask: np.ndarray
    n_interacting: int


def render_frame(tpl: AvatarTemplate, weights: dict, identity: np.ndarray, pose: PoseParams, camera: Camera,
                 cfg: ExperimentConfig, delta_t=None):
    fr = frame_inputs(tpl, pose, camera, cfg.detection())
    res = forward(tpl, weights, identity, fr, delta_t=delta_t, bg=cfg.background, H=cfg.height, W=cfg.width,
                  offset_radius=cfg.offset_radius)
    img = res.image.value
    return img[..., :3].copy(), img[..., 3].copy(), fr


def pose_schedule(n_poses: int) -> list[str]:
    kinds = ["free", "touch", "cross"]
    return [kinds[i % 3] for i in range(n_poses)]


def synthesize(cfg: ExperimentConfig, n_subjects: int, n_poses: int, seed: int, n_cameras: int = 4,
               tpl: AvatarTemplate | None = None):
    """In-memory dataset: (generator weights, identity stack, frames)."""
    if n_subjects < 1 or n_poses < 1:
        raise ValueError("need at least one subject and one pose")
    rng = np.random.default_rng(seed)
    shape = cfg.network_shape()
    weights = generator_weights(shape, seed)
    identities = np.stack([random_identity(shape, rng) for _ in range(n_subjects)])
    tpl = tpl or AvatarTemplate(level=cfg.coarse_level, detection_level=cfg.detection_level, map_size=cfg.map_size)
    cams = camera_ring(cfg, n_cameras)
    frames = []
    for s in range(n_subjects):
        for p, kind in enumerate(pose_schedule(n_poses)):
            pose = random_pose(rng, tpl.rig, kind)
            for cam in cams:
                rgb, mask, fr = render_frame(tpl, weights, identities[s], pose, cam, cfg)
                frames.append(SyntheticFrame(s + 1, pose, cam, kind, rgb, mask, int(fr.labels.flags.sum())))
    return weights, identities, frames


def gen_synthetic_dataset(cfg: ExperimentConfig, out_dir, n_subjects: int = 3, n_poses: int = 4, seed: int = 0,
                          n_cameras: int = 4) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise OSError(f"cannot write dataset to {out}: {e}") from e
    weights, identities, frames = synthesize(cfg, n_subjects, n_poses, seed, n_cameras)
    blocks = dict(weights)
    for s in range(n_subjects):
        blocks[f"identity.s{s + 1}"] = identities[s]
    save_checkpoint(out / "generator.igsn", blocks)
    cfg.save(out / "config.json")
    for s in range(1, n_subjects + 1):
        sdir = out / "subjects" / f"s{s}"
        (sdir / "frames").mkdir(parents=True, exist_ok=True)
        (sdir / "masks").mkdir(parents=True, exist_ok=True)
        entries = []
        for i, f in enumerate(x for x in frames if x.subject == s):
            name = f"{i:04d}.ppm"
            write_ppm(sdir / "frames" / name, f.image)
            write_ppm(sdir / "masks" / name, f.mask)
            entries.append({"pose": f.pose.to_dict(), "camera": camera_to_dict(f.camera),
                            "width": cfg.width, "height": cfg.height, "kind": f.kind,
                            "image": f"frames/{name}", "mask": f"masks/{name}",
                            "interacting_points": f.n_interacting})
        save_scene(sdir / "scene.txt", {"rig_spec": "default", "subject": s, "frames": entries})
    return out
