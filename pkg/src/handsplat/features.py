"""Disentangled appearance representation on top of :mod:`handsplat.graph`.

Identity maps and neural texture maps are (2C, H, W) grids over the UV
plane; channel half 0 serves the left hand and half 1 the right hand.
Encoders are small tanh perceptrons.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import graph as G
from .gaussians import init_head_weights

WEIGHTS_VERSION = 1
POSITION_SCALE = 0.25   # metres mapped to unit range before positional encoding


@dataclass(frozen=True)
class NetworkShape:
    C: int = 32
    E: int = 64
    bands: int = 6
    map_size: int = 64
    hidden: int = 64
    theta_dim: int = 96
    camera_dim: int = 25

    def validate(self) -> None:
        if min(self.C, self.E, self.bands, self.map_size, self.hidden) < 1:
            raise ValueError("network dimensions must be positive")
        if self.map_size < 2:
            raise ValueError("feature maps need at least 2x2 texels")

    @property
    def pose_in(self) -> int:
        return self.theta_dim + self.camera_dim + 2

    @property
    def texel_in(self) -> int:
        return 2 * self.C + 4 * self.bands + self.E


# ---------------------------------------------------------------- encodings

def gamma_encode(x, bands: int) -> G.Var:
    """Per coordinate: sin(2^l pi x), cos(2^l pi x) for l = 0..bands-1, interleaved."""
    if bands < 1:
        raise ValueError("need at least one frequency band")
    x = G._wrap(x)
    n, k = x.shape
    freq = np.pi * 2.0 ** np.arange(bands)
    arg = G.reshape(x, (n, k, 1)) * freq
    s = G.reshape(G.sin(arg), (n, k, bands, 1))
    c = G.reshape(G.cos(arg), (n, k, bands, 1))
    return G.reshape(G.concat([s, c], axis=-1), (n, 2 * k * bands))


def bilinear_matrix(uv: np.ndarray, height: int, width: int) -> sp.csr_matrix:
    """(N, H*W) interpolation weights; texel centres sit at ((i + 0.5)/W, (j + 0.5)/H)."""
    uv = np.asarray(uv, dtype=np.float64)
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ValueError("uv must be (N, 2)")
    if np.any(uv < 0.0) or np.any(uv > 1.0) or not np.all(np.isfinite(uv)):
        raise ValueError("uv outside the unit square")
    x = np.clip(uv[:, 0] * width - 0.5, 0.0, width - 1.0)
    y = np.clip(uv[:, 1] * height - 0.5, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x), width - 2).astype(np.int64)
    y0 = np.minimum(np.floor(y), height - 2).astype(np.int64)
    fx, fy = x - x0, y - y0
    n = len(uv)
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([y0 * width + x0, y0 * width + x0 + 1, (y0 + 1) * width + x0, (y0 + 1) * width + x0 + 1], 1)
    vals = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], 1)
    return sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(n, height * width))


def map_rows(fmap) -> G.Var:
    """(Ch, H, W) grid as an (H*W, Ch) row table."""
    fmap = G._wrap(fmap)
    ch, h, w = fmap.shape
    return G.reshape(G.transpose(fmap, (1, 2, 0)), (h * w, ch))


def sample_map(fmap, uv: np.ndarray, interp: sp.csr_matrix | None = None) -> G.Var:
    """Bilinear lookup of a (Ch, H, W) grid at each uv row; returns (N, Ch)."""
    fmap = G._wrap(fmap)
    if fmap.value.ndim != 3:
        raise ValueError("feature map must be (channels, height, width)")
    _, h, w = fmap.shape
    if interp is None:
        interp = bilinear_matrix(uv, h, w)
    return G.spmm(interp, map_rows(fmap))


def select_half(samples: G.Var, side: np.ndarray) -> G.Var:
    """Keep channels [0, C) for left-hand rows and [C, 2C) for right-hand rows."""
    c = samples.shape[1] // 2
    s = np.asarray(side, dtype=np.float64)[:, None]
    return samples[:, :c] * (1.0 - s) + samples[:, c:] * s


def nearest_texel(uv: np.ndarray, height: int, width: int) -> np.ndarray:
    ix = np.clip(np.floor(uv[:, 0] * width), 0, width - 1).astype(np.int64)
    iy = np.clip(np.floor(uv[:, 1] * height), 0, height - 1).astype(np.int64)
    return iy * width + ix


def neighbourhood_matrix(coarse_parent: np.ndarray, coarse_adjacency: sp.csr_matrix) -> sp.csr_matrix:
    """Row-normalised pooling over points whose coarse vertex lies in the 1-ring of their own."""
    n = len(coarse_parent)
    B = sp.csr_matrix((np.ones(n), (np.arange(n), coarse_parent)), shape=(n, coarse_adjacency.shape[0]))
    P = (B @ coarse_adjacency @ B.T).tocsr()
    P.data[:] = 1.0
    deg = np.asarray(P.sum(axis=1)).ravel()
    return (sp.diags(1.0 / deg) @ P).tocsr()


def camera_vector(camera) -> np.ndarray:
    """Flattened extrinsic (16) then intrinsic (9), intrinsics divided by fx to stay O(1)."""
    return np.concatenate([camera.E.ravel(), (camera.K / camera.K[0, 0]).ravel()])


# ---------------------------------------------------------------- weights

def _dense(rng, n_in, n_out, gain=1.0):
    lim = gain * np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, (n_in, n_out)), np.zeros(n_out)


def init_weights(shape: NetworkShape, rng: np.random.Generator) -> dict:
    shape.validate()
    C, E, H = shape.C, shape.E, shape.hidden
    w = {}
    layers = {
        "pose": [(shape.pose_in, H), (H, H), (H, E)],
        "geo_point": [(6 * shape.bands, H), (H, C)],
        "geo_fuse": [(2 * C + E, H), (H, C)],
        "tex": [(shape.texel_in, H), (H, H), (H, 2 * C)],
    }
    for name, dims in layers.items():
        for i, (a, b) in enumerate(dims):
            w[f"{name}.w{i + 1}"], w[f"{name}.b{i + 1}"] = _dense(rng, a, b)
    for k in ("q", "k", "v"):
        w[f"attn.w{k}"] = _dense(rng, C, C)[0]
    w.update(init_head_weights(rng, C, H))
    return w


def weight_shape(weights: dict) -> NetworkShape:
    C = weights["geo_point.w2"].shape[1]
    E = weights["pose.w3"].shape[1]
    H = weights["pose.w1"].shape[1]
    bands = weights["geo_point.w1"].shape[0] // 6
    return NetworkShape(C=C, E=E, bands=bands, hidden=H, theta_dim=weights["pose.w1"].shape[0] - 27)


def _mlp(x, w: dict, name: str, n_layers: int, last_tanh: bool = False) -> G.Var:
    for i in range(1, n_layers + 1):
        x = G.linear(x, w[f"{name}.w{i}"], w[f"{name}.b{i}"])
        if i < n_layers or last_tanh:
            x = G.tanh(x)
    return x


def _check(cond: bool, msg: str):
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------- encoders

def encode_pose(theta, camera_c, interaction_summary, weights: dict) -> G.Var:
    """Global pose embedding (E,) from joint angles, camera and per-hand interaction fractions."""
    theta = G._wrap(theta)
    theta = G.reshape(theta, (theta.value.size,))
    camera_c = np.asarray(camera_c, dtype=np.float64).ravel()
    summary = np.asarray(interaction_summary, dtype=np.float64).ravel()
    _check(camera_c.size == 25 and summary.size == 2, "camera vector must have 25 entries and summary 2")
    x = G.concat([theta, G._wrap(camera_c), G._wrap(summary)], axis=0)
    _check(x.shape[0] == weights["pose.w1"].shape[0], "pose input does not match encoder width")
    return _mlp(G.reshape(x, (1, -1)), weights, "pose", 3)[0]


def encode_geometry(points, pool: sp.csr_matrix, pose_emb, weights: dict) -> G.Var:
    """Per-point features from encoded position, local pooling and the pose context."""
    points = G._wrap(points)
    pose_emb = G._wrap(pose_emb)
    n = points.shape[0]
    _check(pool.shape == (n, n), "pooling matrix does not match point count")
    bands = weights["geo_point.w1"].shape[0] // 6
    h = _mlp(gamma_encode(points * (1.0 / POSITION_SCALE), bands), weights, "geo_point", 2, last_tanh=True)
    pooled = G.spmm(pool, h)
    return _mlp(G.concat([h, pooled, G.broadcast_rows(pose_emb, n)], axis=1), weights, "geo_fuse", 2)


def decode_texture(identity_slice, pose_emb, uv: np.ndarray, vertex_id: np.ndarray, weights: dict,
                   interp: sp.csr_matrix | None = None) -> G.Var:
    """Neural texture map (2C, H, W) conditioned on an identity map and the pose embedding.

    Vertex embeddings are scattered to their nearest texel; when several
    vertices land on one texel the highest vertex id wins, independent of
    the order the rows arrive in.
    """
    identity_slice = G._wrap(identity_slice)
    pose_emb = G._wrap(pose_emb)
    ch, h, w = identity_slice.shape
    _check(ch == weights["tex.w3"].shape[1], "identity map channels do not match decoder")
    uv = np.asarray(uv, dtype=np.float64)
    vertex_id = np.asarray(vertex_id)
    _check(len(uv) == len(vertex_id), "uv and vertex ids misaligned")
    order = np.argsort(vertex_id, kind="stable")
    uv_o = uv[order]
    if interp is not None:
        interp = interp[order]
    bands = (weights["tex.w1"].shape[0] - ch - pose_emb.shape[0]) // 4
    emb = G.concat([sample_map(identity_slice, uv_o, interp), gamma_encode(uv_o, bands),
                    G.broadcast_rows(pose_emb, len(uv_o))], axis=1)
    cond = G.scatter_rows(emb, nearest_texel(uv_o, h, w), h * w)
    t = _mlp(cond, weights, "tex", 3)
    return G.transpose(G.reshape(t, (h, w, ch)), (2, 0, 1))


def texture_features(t, delta_t, uv: np.ndarray, side: np.ndarray, interp: sp.csr_matrix | None = None) -> G.Var:
    """Sample (t + [dt, dt]) at each point and keep that point's hand half."""
    t = G._wrap(t)
    if delta_t is not None:
        delta_t = G._wrap(delta_t)
        _check(2 * delta_t.shape[0] == t.shape[0], "texture bias must have half the texture channels")
        t = t + G.concat([delta_t, delta_t], axis=0)
    return select_half(sample_map(t, uv, interp), side)


def fuse_features(geometric, textural) -> G.Var:
    geometric, textural = G._wrap(geometric), G._wrap(textural)
    _check(geometric.shape == textural.shape, "feature shapes differ")
    return geometric + textural


def interaction_attention(f, flags: np.ndarray, weights: dict) -> G.Var:
    """Single-head self-attention with residual over the flagged rows only."""
    f = G._wrap(f)
    flags = np.asarray(flags)
    _check(len(flags) == f.shape[0], "labels do not align with feature rows")
    idx = np.flatnonzero(flags)
    if len(idx) == 0:
        return f
    sub = G.take_rows(f, idx)
    q = G.matmul(sub, weights["attn.wq"])
    k = G.matmul(sub, weights["attn.wk"])
    v = G.matmul(sub, weights["attn.wv"])
    a = G.softmax(G.matmul(q, G.transpose(k)) * (1.0 / np.sqrt(f.shape[1])), axis=1)
    return G.replace_rows(f, idx, sub + G.matmul(a, v))
