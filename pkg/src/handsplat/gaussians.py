"""Gaussian cloud container, attribute heads and validity-driven prune/split."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import graph as G
from .interaction import InteractionLabels

# constant offsets so an all-zero head yields unit quaternions and small Gaussians
QUAT_OFFSET = np.array([1.0, 0.0, 0.0, 0.0])
HEAD_SLICES = {"offset": slice(0, 3), "log_scale": slice(3, 6), "quat": slice(6, 10),
               "opacity": slice(10, 11), "color": slice(11, 14), "validity": slice(14, 15)}
HEAD_DIM = 15


@dataclass
class GaussianCloud:
    means: np.ndarray          # (N, 3)
    log_scales: np.ndarray     # (N, 3)
    quats: np.ndarray          # (N, 4) unit, (w, x, y, z)
    opacity: np.ndarray        # (N,)
    colors: np.ndarray         # (N, 3)
    validity: np.ndarray       # (N,)
    uv: np.ndarray             # (N, 2)
    side: np.ndarray           # (N,)
    parent: np.ndarray         # (N,) source mesh vertex

    def __len__(self):
        return len(self.means)

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    @classmethod
    def concat(cls, parts) -> "GaussianCloud":
        return cls(**{f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)})

    def validate(self) -> None:
        n = len(self.means)
        if n < 1:
            raise ValueError("empty cloud")
        for f in fields(self):
            if len(getattr(self, f.name)) != n:
                raise ValueError(f"field {f.name} has wrong length")
        if np.any(np.abs(np.linalg.norm(self.quats, axis=1) - 1.0) > 1e-9):
            raise ValueError("quaternions are not unit length")
        if np.any((self.opacity <= 0) | (self.opacity >= 1)):
            raise ValueError("opacity outside (0, 1)")
        if np.any((self.colors < 0) | (self.colors > 1)) or np.any((self.validity < 0) | (self.validity > 1)):
            raise ValueError("color or validity outside [0, 1]")


@dataclass(frozen=True)
class RefinementConfig:
    prune_threshold: float = 0.1
    split_threshold: float = 0.9
    max_splits_fraction: float = 0.1
    offset_radius: float = 0.005
    split_shrink: float = 1.6

    def __post_init__(self):
        if not 0.0 <= self.prune_threshold < self.split_threshold <= 1.0:
            raise ValueError("need 0 <= prune_threshold < split_threshold <= 1")


def init_head_weights(rng: np.random.Generator, width: int, hidden: int = 64, scale: float = 1.0) -> dict:
    lim1 = scale * np.sqrt(6.0 / (width + hidden))
    lim2 = 0.1 * scale * np.sqrt(6.0 / (hidden + HEAD_DIM))
    return {
        "head.w1": rng.uniform(-lim1, lim1, (width, hidden)),
        "head.b1": np.zeros(hidden),
        "head.w2": rng.uniform(-lim2, lim2, (hidden, HEAD_DIM)),
        "head.b2": np.zeros(HEAD_DIM),
    }


def soft_clamp(v: G.Var, radius: float) -> G.Var:
    """Radially squash rows of ``v`` so their norm stays strictly below ``radius``."""
    n2 = G.sum_(G.square(v), axis=1, keepdims=True)
    return v * (radius / G.sqrt(n2 + 1.0))


def predict_attributes(f: G.Var, base_positions: np.ndarray, weights: dict, *,
                       offset_radius: float = 0.005, base_log_scale: float = np.log(0.004)) -> dict:
    """Map fused features to differentiable Gaussian attributes.

    Returns a dict of graph nodes keyed by attribute name (``means``,
    ``log_scales``, ``quats``, ``opacity``, ``colors``, ``validity``,
    ``offset``).
    """
    if f.shape[0] != len(base_positions):
        raise ValueError("feature rows do not align with base positions")
    h = G.tanh(G.linear(f, weights["head.w1"], weights["head.b1"]))
    raw = G.linear(h, weights["head.w2"], weights["head.b2"])
    offset = soft_clamp(raw[:, HEAD_SLICES["offset"]], offset_radius)
    q = raw[:, HEAD_SLICES["quat"]] + QUAT_OFFSET
    q = q / G.sqrt(G.sum_(G.square(q), axis=1, keepdims=True))
    return {
        "offset": offset,
        "means": offset + base_positions,
        "log_scales": raw[:, HEAD_SLICES["log_scale"]] + base_log_scale,
        "quats": q,
        "opacity": G.reshape(G.sigmoid(raw[:, HEAD_SLICES["opacity"]]), (-1,)),
        "colors": G.sigmoid(raw[:, HEAD_SLICES["color"]]),
        "validity": G.reshape(G.sigmoid(raw[:, HEAD_SLICES["validity"]]), (-1,)),
    }


def cloud_from_attributes(attrs: dict, uv, side, parent) -> GaussianCloud:
    return GaussianCloud(
        means=attrs["means"].value.copy(), log_scales=attrs["log_scales"].value.copy(),
        quats=attrs["quats"].value.copy(), opacity=attrs["opacity"].value.copy(),
        colors=attrs["colors"].value.copy(), validity=attrs["validity"].value.copy(),
        uv=np.asarray(uv).copy(), side=np.asarray(side).copy(), parent=np.asarray(parent).copy())


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))


def refine(cloud: GaussianCloud, cfg: RefinementConfig = RefinementConfig(),
           return_origin: bool = False):
    """Prune low-validity Gaussians and split high-validity ones in two.

    Survivors keep their order; children follow in parent order.  A split
    moves the two children to mean +/- half the largest scale along that
    principal axis and divides that axis' scale by ``cfg.split_shrink``.
    """
    phi = cloud.validity
    keep = phi >= cfg.prune_threshold
    if not np.any(keep):
        keep = np.zeros(len(cloud), dtype=bool)
        keep[int(np.argmax(phi))] = True
    split = keep & (phi > cfg.split_threshold)
    if cfg.max_splits_fraction < 1.0:
        cap = max(1, int(np.floor(cfg.max_splits_fraction * len(cloud))))
        cand = np.flatnonzero(split)
        if len(cand) > cap:
            # highest validity first, ties by index
            chosen = cand[np.lexsort((cand, -phi[cand]))[:cap]]
            split = np.zeros_like(split)
            split[chosen] = True
    survivors = np.flatnonzero(keep & ~split)
    parents = np.flatnonzero(split)

    kids = cloud.subset(np.repeat(parents, 2))
    if len(parents):
        scales = np.exp(cloud.log_scales[parents])
        axis = np.argmax(scales, axis=1)
        R = quat_to_rotmat(cloud.quats[parents])
        direction = R[np.arange(len(parents)), :, axis]
        half = 0.5 * scales[np.arange(len(parents)), axis]
        delta = direction * half[:, None]
        pm = cloud.means[parents]
        kids.means = np.stack([pm + delta, pm - delta], axis=1).reshape(-1, 3)
        ls = cloud.log_scales[parents].copy()
        ls[np.arange(len(parents)), axis] -= np.log(cfg.split_shrink)
        kids.log_scales = np.repeat(ls, 2, axis=0)
        kids.validity = np.full(2 * len(parents), 0.5)
    out = GaussianCloud.concat([cloud.subset(survivors), kids])
    if return_origin:
        return out, np.concatenate([survivors, np.repeat(parents, 2)])
    return out


def inherit_labels(cloud: GaussianCloud, parent_labels: InteractionLabels) -> InteractionLabels:
    """Each Gaussian takes the interaction flag of its source vertex."""
    pid = np.asarray(cloud.parent, dtype=np.int64)
    if np.any(pid < 0) or np.any(pid >= len(parent_labels.flags)):
        raise ValueError("dangling parent vertex id")
    cross = None if parent_labels.cross is None else parent_labels.cross[pid].copy()
    return InteractionLabels(parent_labels.flags[pid].copy(), np.asarray(cloud.side).copy(), cross)
