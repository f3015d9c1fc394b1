"""Versioned file formats: checkpoints, cloud snapshots, labels, images, scene/pose/camera JSON."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .gaussians import GaussianCloud
from .hand_model import PoseParams
from .interaction import InteractionLabels
from .rasterizer import Camera

CHECKPOINT_MAGIC = b"IGSN"
CHECKPOINT_VERSION = 1
CLOUD_MAGIC = b"GCLD"
CLOUD_VERSION = 1
LABEL_MAGIC = b"IHLB"
LABEL_VERSION = 1
JSON_VERSION = 1


class FormatError(ValueError):
    pass


def _check_magic(data: bytes, magic: bytes, what: str):
    if data[:4] != magic:
        raise FormatError(f"not a {what} file (bad magic {data[:4]!r})")


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, blocks: dict) -> None:
    """Named float64 arrays as length-prefixed little-endian blocks."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(blocks))
    for name in sorted(blocks):
        arr = np.asarray(blocks[name], dtype="<f8")   # tobytes() is C-ordered; keeps 0-d shapes
        key = name.encode()
        out += struct.pack("<I", len(key)) + key
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    _check_magic(data, CHECKPOINT_MAGIC, "checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 12
    blocks = {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + klen].decode()
        off += klen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise FormatError("trailing bytes in checkpoint")
    return blocks


# ---------------------------------------------------------------- clouds

_CLOUD_FIELDS = (("means", 3), ("log_scales", 3), ("quats", 4), ("opacity", 1), ("colors", 3),
                 ("validity", 1), ("uv", 2), ("side", 1), ("parent", 1))
CLOUD_RECORD = sum(w for _, w in _CLOUD_FIELDS)


def save_cloud(path, cloud: GaussianCloud) -> None:
    n = len(cloud)
    rec = np.concatenate([np.asarray(getattr(cloud, k), dtype=np.float64).reshape(n, w) for k, w in _CLOUD_FIELDS],
                         axis=1).astype("<f4")
    Path(path).write_bytes(CLOUD_MAGIC + struct.pack("<II", CLOUD_VERSION, n) + rec.tobytes())


def load_cloud(path) -> GaussianCloud:
    data = Path(path).read_bytes()
    _check_magic(data, CLOUD_MAGIC, "cloud")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CLOUD_VERSION:
        raise FormatError(f"unsupported cloud version {version}")
    rec = np.frombuffer(data, dtype="<f4", offset=12).astype(np.float64)
    if rec.size != n * CLOUD_RECORD:
        raise FormatError("cloud payload size does not match the header")
    rec = rec.reshape(n, CLOUD_RECORD)
    out, c = {}, 0
    for k, w in _CLOUD_FIELDS:
        out[k] = rec[:, c:c + w] if w > 1 else rec[:, c]
        c += w
    # f32 storage denormalises quaternions slightly
    out["quats"] = out["quats"] / np.linalg.norm(out["quats"], axis=1, keepdims=True)
    out["side"] = out["side"].astype(np.int64)
    out["parent"] = out["parent"].astype(np.int64)
    return GaussianCloud(**out)


# ---------------------------------------------------------------- labels

def save_labels(path, labels: InteractionLabels) -> None:
    flags = np.asarray(labels.flags, dtype=np.uint8)
    Path(path).write_bytes(LABEL_MAGIC + struct.pack("<II", LABEL_VERSION, len(flags)) + flags.tobytes())


def load_labels(path) -> InteractionLabels:
    data = Path(path).read_bytes()
    _check_magic(data, LABEL_MAGIC, "label")
    version, n = struct.unpack_from("<II", data, 4)
    if version != LABEL_VERSION:
        raise FormatError(f"unsupported label version {version}")
    if len(data) != 12 + n:
        raise FormatError("label payload size does not match the header")
    return InteractionLabels(np.frombuffer(data, dtype=np.uint8, offset=12).copy())


# ---------------------------------------------------------------- images

def to_bytes8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6; a 2-D array is written as grey."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + to_bytes8(img).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise FormatError("not a binary PPM")
    tokens, off = [], 2
    while len(tokens) < 3:
        while data[off:off + 1].isspace():
            off += 1
        if data[off:off + 1] == b"#":
            off = data.index(b"\n", off) + 1
            continue
        end = off
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(int(data[off:end]))
        off = end
    off += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError("only maxval 255 is supported")
    px = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off)
    return px.reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------- json documents

def _dump(path, kind: str, payload: dict) -> None:
    doc = {"format": kind, "version": JSON_VERSION, **payload}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def _load(path, kind: str) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != kind:
        raise FormatError(f"{path} is not a {kind} file")
    if doc.get("version") != JSON_VERSION:
        raise FormatError(f"unsupported {kind} version {doc.get('version')!r}")
    return doc


def camera_to_dict(cam: Camera) -> dict:
    return {"K": cam.K.tolist(), "E": cam.E.tolist()}


def camera_from_dict(d: dict) -> Camera:
    return Camera(np.asarray(d["K"]), np.asarray(d["E"]))


def save_camera(path, cam: Camera, width: int, height: int) -> None:
    _dump(path, "camera", {**camera_to_dict(cam), "width": width, "height": height})


def load_camera(path) -> tuple[Camera, int, int]:
    d = _load(path, "camera")
    return camera_from_dict(d), int(d["width"]), int(d["height"])


def save_pose(path, pose: PoseParams) -> None:
    _dump(path, "pose", pose.to_dict())


def load_pose(path) -> PoseParams:
    p = PoseParams.from_dict(_load(path, "pose"))
    p.validate()
    return p


def save_poses(path, poses: list) -> None:
    _dump(path, "pose_sequence", {"poses": [p.to_dict() for p in poses]})


def load_poses(path) -> list:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") == "pose":
        return [load_pose(path)]
    doc = _load(path, "pose_sequence")
    out = [PoseParams.from_dict(p) for p in doc["poses"]]
    for p in out:
        p.validate()
    return out


def save_scene(path, scene: dict) -> None:
    frames = scene["frames"]
    for key in ("pose", "camera"):
        if any(key not in f for f in frames):
            raise FormatError(f"every frame needs a {key}")
    _dump(path, "scene", scene)


def load_scene(path) -> dict:
    doc = _load(path, "scene")
    for f in doc["frames"]:
        if "pose" not in f or "camera" not in f:
            raise FormatError("scene frame without pose or camera")
    return doc
