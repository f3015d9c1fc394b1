"""Tile-based differentiable Gaussian splatting on the CPU.

Forward: EWA projection of every Gaussian, binning into 16x16 pixel tiles
by the bounding box of its 3-sigma ellipse, depth sort with index
tie-break, then front-to-back alpha compositing per pixel.  A Gaussian
contributes to a pixel only inside its 3-sigma ellipse, so the tiled and
the naive per-pixel renderers see identical contributor lists.

Backward: per-pixel reverse traversal recovers transmittance by division,
accumulates per (tile, Gaussian) pair buffers owned by one tile each, and
reduces them in tile order.  Projection gradients are chained analytically.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .gaussians import GaussianCloud, quat_to_rotmat

TILE = 16
NEAR = 0.01
LOW_PASS = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
SIGMA_CUTOFF2 = 9.0


@dataclass
class Camera:
    K: np.ndarray   # (3, 3) pixels
    E: np.ndarray   # (4, 4) world-to-camera

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.E = np.asarray(self.E, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.K.shape != (3, 3) or self.E.shape != (4, 4):
            raise ValueError("camera needs a 3x3 intrinsic and a 4x4 extrinsic matrix")
        if not (self.K[0, 0] > 0 and self.K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if self.K[0, 1] != 0 or np.any(self.K[2] != [0, 0, 1]) or self.K[1, 0] != 0:
            raise ValueError("only skew-free pinhole intrinsics are supported")
        R = self.E[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("extrinsic rotation is not orthonormal")

    def flatten(self) -> np.ndarray:
        """16 extrinsic entries followed by 9 intrinsic entries."""
        return np.concatenate([self.E.ravel(), self.K.ravel()])

    @classmethod
    def from_flat(cls, c) -> "Camera":
        c = np.asarray(c, dtype=np.float64)
        return cls(K=c[16:].reshape(3, 3), E=c[:16].reshape(4, 4))

    def with_focal_scale(self, s: float) -> "Camera":
        K = self.K.copy()
        K[0, 0] *= s
        K[1, 1] *= s
        return Camera(K, self.E.copy())

    @property
    def center(self) -> np.ndarray:
        return -self.E[:3, :3].T @ self.E[:3, 3]


def look_at(eye, target, up=(0.0, 1.0, 0.0), focal=100.0, width=64, height=64) -> Camera:
    """Pinhole camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ eye
    K = np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K, E)


@dataclass
class Projection:
    mean2d: np.ndarray       # (N, 2)
    cov2d: np.ndarray        # (N, 3) xx, xy, yy
    conic: np.ndarray        # (N, 3) a, b, c of the inverse covariance
    depth: np.ndarray        # (N,)
    visible: np.ndarray      # (N,) bool
    # cached intermediates for the adjoint
    t: np.ndarray
    J: np.ndarray
    Tm: np.ndarray
    R: np.ndarray
    scales: np.ndarray
    cov3d: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray


def project_gaussians(means, log_scales, quats, camera: Camera, dtype=np.float64) -> Projection:
    means = np.asarray(means, dtype=dtype)
    log_scales = np.asarray(log_scales, dtype=dtype)
    quats = np.asarray(quats, dtype=dtype)
    Rw = camera.E[:3, :3].astype(dtype)
    tw = camera.E[:3, 3].astype(dtype)
    fx, fy = dtype(camera.K[0, 0]), dtype(camera.K[1, 1])
    cx, cy = dtype(camera.K[0, 2]), dtype(camera.K[1, 2])

    t = means @ Rw.T + tw
    depth = t[:, 2]
    visible = depth > NEAR
    tz = np.where(visible, depth, dtype(1.0))
    inv_z = 1.0 / tz
    n = len(means)
    J = np.zeros((n, 2, 3), dtype=dtype)
    J[:, 0, 0] = fx * inv_z
    J[:, 0, 2] = -fx * t[:, 0] * inv_z * inv_z
    J[:, 1, 1] = fy * inv_z
    J[:, 1, 2] = -fy * t[:, 1] * inv_z * inv_z
    mean2d = np.stack([fx * t[:, 0] * inv_z + cx, fy * t[:, 1] * inv_z + cy], axis=1)

    qnorm = np.linalg.norm(quats, axis=1, keepdims=True)
    qn = quats / qnorm
    R = quat_to_rotmat(qn)
    scales = np.exp(log_scales)
    M = R * scales[:, None, :]
    cov3d = M @ np.transpose(M, (0, 2, 1))
    Tm = J @ Rw
    S2 = Tm @ cov3d @ np.transpose(Tm, (0, 2, 1))
    cov2d = np.stack([S2[:, 0, 0] + LOW_PASS, 0.5 * (S2[:, 0, 1] + S2[:, 1, 0]), S2[:, 1, 1] + LOW_PASS], axis=1)
    det = cov2d[:, 0] * cov2d[:, 2] - cov2d[:, 1] * cov2d[:, 1]
    conic = np.stack([cov2d[:, 2] / det, -cov2d[:, 1] / det, cov2d[:, 0] / det], axis=1)
    return Projection(mean2d, cov2d, conic, depth, visible, t, J, Tm, R, scales, cov3d, qn, qnorm[:, 0])


def project_gaussian(mean, log_scale, quat, camera: Camera):
    """Single Gaussian: (2D mean in pixels, 2x2 covariance, depth); None when culled."""
    p = project_gaussians(np.atleast_2d(mean), np.atleast_2d(log_scale), np.atleast_2d(quat), camera)
    if not p.visible[0]:
        return None
    a, b, c = p.cov2d[0]
    return p.mean2d[0], np.array([[a, b], [b, c]]), float(p.depth[0])


# ---------------------------------------------------------------- kernels

@njit(cache=True, inline="always")
def _power(px, py, mx, my, a, b, c):
    dx = px - mx
    dy = py - my
    return a * dx * dx + 2.0 * b * dx * dy + c * dy * dy, dx, dy


@njit(cache=True, parallel=True)
def _forward_tiles(tile_start, pair_g, mean2d, conic, opacity, colors, bg, H, W, tiles_x,
                   rgb, t_final, last, count, sig):
    n_tiles = len(tile_start) - 1
    for tile in prange(n_tiles):
        ty, tx = tile // tiles_x, tile % tiles_x
        y0, x0 = ty * 16, tx * 16
        for y in range(y0, min(y0 + 16, H)):
            for x in range(x0, min(x0 + 16, W)):
                px = float(x)
                py = float(y)
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                n = 0
                s = 0
                end = tile_start[tile]
                for k in range(tile_start[tile], tile_start[tile + 1]):
                    g = pair_g[k]
                    q, dx, dy = _power(px, py, mean2d[g, 0], mean2d[g, 1], conic[g, 0], conic[g, 1], conic[g, 2])
                    if q > 9.0:
                        continue
                    alpha = opacity[g] * np.exp(-0.5 * q)
                    clamped = alpha > 0.99
                    if clamped:
                        alpha = 0.99
                    test_T = T * (1.0 - alpha)
                    if test_T < 1e-4:
                        s += 1 << 40
                        break
                    w = alpha * T
                    c0 += colors[g, 0] * w
                    c1 += colors[g, 1] * w
                    c2 += colors[g, 2] * w
                    T = test_T
                    n += 1
                    s += (g + 1) * (2 if clamped else 1)
                    end = k + 1
                rgb[y, x, 0] = c0 + bg[0] * T
                rgb[y, x, 1] = c1 + bg[1] * T
                rgb[y, x, 2] = c2 + bg[2] * T
                t_final[y, x] = T
                last[y, x] = end
                count[y, x] = n
                sig[y, x] = s


@njit(cache=True)
def _forward_naive(order, mean2d, conic, opacity, colors, bg, H, W, rgb, t_final):
    for y in range(H):
        for x in range(W):
            px = float(x)
            py = float(y)
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for k in range(len(order)):
                g = order[k]
                q, dx, dy = _power(px, py, mean2d[g, 0], mean2d[g, 1], conic[g, 0], conic[g, 1], conic[g, 2])
                if q > 9.0:
                    continue
                alpha = opacity[g] * np.exp(-0.5 * q)
                if alpha > 0.99:
                    alpha = 0.99
                test_T = T * (1.0 - alpha)
                if test_T < 1e-4:
                    break
                w = alpha * T
                c0 += colors[g, 0] * w
                c1 += colors[g, 1] * w
                c2 += colors[g, 2] * w
                T = test_T
            rgb[y, x, 0] = c0 + bg[0] * T
            rgb[y, x, 1] = c1 + bg[1] * T
            rgb[y, x, 2] = c2 + bg[2] * T
            t_final[y, x] = T


@njit(cache=True, parallel=True)
def _backward_tiles(tile_start, pair_g, mean2d, conic, opacity, colors, bg, H, W, tiles_x,
                    t_final, last, d_rgb, d_sil, pair_grad):
    # pair_grad columns: mean x, mean y, conic a, b, c, opacity, r, g, b
    n_tiles = len(tile_start) - 1
    for tile in prange(n_tiles):
        ty, tx = tile // tiles_x, tile % tiles_x
        y0, x0 = ty * 16, tx * 16
        for y in range(y0, min(y0 + 16, H)):
            for x in range(x0, min(x0 + 16, W)):
                px = float(x)
                py = float(y)
                Tf = t_final[y, x]
                T = Tf
                g0, g1, g2 = d_rgb[y, x, 0], d_rgb[y, x, 1], d_rgb[y, x, 2]
                gm = d_sil[y, x]
                s0, s1, s2 = bg[0] * Tf, bg[1] * Tf, bg[2] * Tf
                for k in range(last[y, x] - 1, tile_start[tile] - 1, -1):
                    g = pair_g[k]
                    q, dx, dy = _power(px, py, mean2d[g, 0], mean2d[g, 1], conic[g, 0], conic[g, 1], conic[g, 2])
                    if q > 9.0:
                        continue
                    G = np.exp(-0.5 * q)
                    alpha = opacity[g] * G
                    clamped = alpha > 0.99
                    if clamped:
                        alpha = 0.99
                    one_m = 1.0 - alpha
                    T = T / one_m
                    cr, cg, cb = colors[g, 0], colors[g, 1], colors[g, 2]
                    d_alpha = (g0 * (cr * T - s0 / one_m) + g1 * (cg * T - s1 / one_m)
                               + g2 * (cb * T - s2 / one_m) + gm * Tf / one_m)
                    w = alpha * T
                    s0 += cr * w
                    s1 += cg * w
                    s2 += cb * w
                    pair_grad[k, 6] += w * g0
                    pair_grad[k, 7] += w * g1
                    pair_grad[k, 8] += w * g2
                    if clamped:
                        continue
                    pair_grad[k, 5] += d_alpha * G
                    dq = -0.5 * G * d_alpha * opacity[g]
                    a, b, c = conic[g, 0], conic[g, 1], conic[g, 2]
                    pair_grad[k, 2] += dq * dx * dx
                    pair_grad[k, 3] += dq * 2.0 * dx * dy
                    pair_grad[k, 4] += dq * dy * dy
                    pair_grad[k, 0] += -2.0 * dq * (a * dx + b * dy)
                    pair_grad[k, 1] += -2.0 * dq * (b * dx + c * dy)


@contextmanager
def _threads(workers):
    if workers is None:
        yield
        return
    old = numba.get_num_threads()
    numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))
    try:
        yield
    finally:
        numba.set_num_threads(old)


# ---------------------------------------------------------------- driver

@dataclass
class RenderedImage:
    rgb: np.ndarray          # (H, W, 3)
    silhouette: np.ndarray   # (H, W)
    contributors: np.ndarray  # (H, W)


@dataclass
class RenderState:
    proj: Projection
    camera: Camera
    opacity: np.ndarray
    colors: np.ndarray
    bg: np.ndarray
    H: int
    W: int
    tiles_x: int
    tile_start: np.ndarray
    pair_g: np.ndarray
    t_final: np.ndarray
    last: np.ndarray
    support: np.ndarray
    timings: dict


@dataclass
class RenderGradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray


def depth_order(depth: np.ndarray, visible: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(visible)
    return idx[np.lexsort((idx, depth[idx]))]


def bin_tiles(proj: Projection, order: np.ndarray, H: int, W: int):
    """(tile_start, pair_g): per-tile contributor lists in depth order."""
    tiles_x = (W + TILE - 1) // TILE
    tiles_y = (H + TILE - 1) // TILE
    m = proj.mean2d[order]
    ext = 3.0 * np.sqrt(proj.cov2d[order][:, [0, 2]]) + 1.0
    lo = np.floor((m - ext) / TILE)
    hi = np.floor((m + ext) / TILE)
    x0 = np.clip(lo[:, 0], 0, tiles_x).astype(np.int64)
    x1 = np.clip(hi[:, 0], -1, tiles_x - 1).astype(np.int64)
    y0 = np.clip(lo[:, 1], 0, tiles_y).astype(np.int64)
    y1 = np.clip(hi[:, 1], -1, tiles_y - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    cnt = nx * ny
    total = int(cnt.sum())
    rank = np.repeat(np.arange(len(order)), cnt)
    local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    tx = x0[rank] + local % np.maximum(nx[rank], 1)
    ty = y0[rank] + local // np.maximum(nx[rank], 1)
    tile_id = ty * tiles_x + tx
    srt = np.argsort(tile_id, kind="stable")
    pair_g = order[rank[srt]].astype(np.int64)
    counts = np.bincount(tile_id, minlength=tiles_x * tiles_y)
    tile_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return tile_start, pair_g, tiles_x


def render_arrays(means, log_scales, quats, opacity, colors, camera: Camera, bg=(0.0, 0.0, 0.0),
                  H: int = 64, W: int = 64, dtype=np.float64, workers=None):
    """Render raw attribute arrays; returns (RenderedImage, RenderState)."""
    import time

    if H <= 0 or W <= 0:
        raise ValueError("image size must be positive")
    timings = {}
    t0 = time.perf_counter()
    proj = project_gaussians(means, log_scales, quats, camera, dtype)
    t1 = time.perf_counter()
    order = depth_order(proj.depth, proj.visible)
    tile_start, pair_g, tiles_x = bin_tiles(proj, order, H, W)
    t2 = time.perf_counter()
    opacity = np.ascontiguousarray(opacity, dtype=dtype)
    colors = np.ascontiguousarray(colors, dtype=dtype)
    bg = np.asarray(bg, dtype=dtype)
    rgb = np.empty((H, W, 3), dtype=dtype)
    t_final = np.empty((H, W), dtype=dtype)
    last = np.empty((H, W), dtype=np.int64)
    count = np.empty((H, W), dtype=np.int64)
    sig = np.empty((H, W), dtype=np.int64)
    with _threads(workers):
        _forward_tiles(tile_start, pair_g, np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
                       opacity, colors, bg, H, W, tiles_x, rgb, t_final, last, count, sig)
    t3 = time.perf_counter()
    timings.update(project_ms=1e3 * (t1 - t0), bin_sort_ms=1e3 * (t2 - t1), raster_ms=1e3 * (t3 - t2))
    img = RenderedImage(rgb, 1.0 - t_final, count)
    state = RenderState(proj, camera, opacity, colors, bg, H, W, tiles_x, tile_start, pair_g,
                        t_final, last, sig, timings)
    return img, state


def render(cloud: GaussianCloud, camera: Camera, bg=(0.0, 0.0, 0.0), H: int = 64, W: int = 64,
           dtype=np.float64, workers=None, return_state: bool = False):
    img, state = render_arrays(cloud.means, cloud.log_scales, cloud.quats, cloud.opacity, cloud.colors,
                               camera, bg, H, W, dtype, workers)
    return (img, state) if return_state else img


def render_naive(cloud: GaussianCloud, camera: Camera, bg=(0.0, 0.0, 0.0), H: int = 64, W: int = 64,
                 dtype=np.float64) -> RenderedImage:
    """Reference renderer: every pixel walks every visible Gaussian in depth order."""
    proj = project_gaussians(cloud.means, cloud.log_scales, cloud.quats, camera, dtype)
    order = depth_order(proj.depth, proj.visible).astype(np.int64)
    rgb = np.empty((H, W, 3), dtype=dtype)
    t_final = np.empty((H, W), dtype=dtype)
    _forward_naive(order, np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
                   np.ascontiguousarray(cloud.opacity, dtype=dtype), np.ascontiguousarray(cloud.colors, dtype=dtype),
                   np.asarray(bg, dtype=dtype), H, W, rgb, t_final)
    return RenderedImage(rgb, 1.0 - t_final, np.zeros((H, W), dtype=np.int64))


def _rotmat_vjp(q, dR):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


def projection_backward(proj: Projection, camera: Camera, d_mean2d, d_conic):
    """Chain screen-space gradients back to (means, log_scales, quats)."""
    Rw = camera.E[:3, :3]
    fx, fy = camera.K[0, 0], camera.K[1, 1]
    vis = proj.visible
    d_mean2d = np.where(vis[:, None], d_mean2d, 0.0)
    d_conic = np.where(vis[:, None], d_conic, 0.0)
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    A = np.stack([a, b, b, c], axis=1).reshape(-1, 2, 2)
    # conic b appears in both off-diagonal entries of the inverse covariance
    GA = np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1], 0.5 * d_conic[:, 1], d_conic[:, 2]], axis=1).reshape(-1, 2, 2)
    GS = -A @ GA @ A
    GSt = GS + np.transpose(GS, (0, 2, 1))
    Tm, S3 = proj.Tm, proj.cov3d
    dTm = 0.5 * (GSt @ Tm @ S3 + np.transpose(GSt, (0, 2, 1)) @ Tm @ np.transpose(S3, (0, 2, 1)))
    dS3 = np.transpose(Tm, (0, 2, 1)) @ GS @ Tm
    M = proj.R * proj.scales[:, None, :]
    dM = (dS3 + np.transpose(dS3, (0, 2, 1))) @ M
    dR = dM * proj.scales[:, None, :]
    d_scales = (dM * proj.R).sum(axis=1)
    d_log_scales = d_scales * proj.scales
    dqn = _rotmat_vjp(proj.qn, dR)
    d_quats = (dqn - proj.qn * (proj.qn * dqn).sum(axis=1, keepdims=True)) / proj.qnorm[:, None]

    dJ = dTm @ Rw.T
    t = proj.t
    tz = np.where(vis, t[:, 2], 1.0)
    iz = 1.0 / tz
    dt = np.zeros_like(t)
    # mean2d = (fx tx / tz + cx, fy ty / tz + cy)
    dt[:, 0] += d_mean2d[:, 0] * fx * iz
    dt[:, 1] += d_mean2d[:, 1] * fy * iz
    dt[:, 2] += -(d_mean2d[:, 0] * fx * t[:, 0] + d_mean2d[:, 1] * fy * t[:, 1]) * iz * iz
    # J entries
    dt[:, 0] += -dJ[:, 0, 2] * fx * iz * iz
    dt[:, 1] += -dJ[:, 1, 2] * fy * iz * iz
    dt[:, 2] += (-dJ[:, 0, 0] * fx * iz * iz + dJ[:, 0, 2] * 2 * fx * t[:, 0] * iz ** 3
                 - dJ[:, 1, 1] * fy * iz * iz + dJ[:, 1, 2] * 2 * fy * t[:, 1] * iz ** 3)
    dt = np.where(vis[:, None], dt, 0.0)
    d_log_scales = np.where(vis[:, None], d_log_scales, 0.0)
    d_quats = np.where(vis[:, None], d_quats, 0.0)
    return dt @ Rw, d_log_scales, d_quats


def render_backward(state: RenderState, d_rgb: np.ndarray, d_sil: np.ndarray | None = None,
                    workers=None) -> RenderGradients:
    """Exact adjoint of :func:`render_arrays` for the given upstream gradients."""
    n = len(state.opacity)
    d_rgb = np.ascontiguousarray(d_rgb, dtype=np.float64)
    d_sil = np.zeros((state.H, state.W)) if d_sil is None else np.ascontiguousarray(d_sil, dtype=np.float64)
    proj = state.proj
    pair_grad = np.zeros((len(state.pair_g), 9))
    with _threads(workers):
        _backward_tiles(state.tile_start, state.pair_g, np.ascontiguousarray(proj.mean2d, dtype=np.float64),
                        np.ascontiguousarray(proj.conic, dtype=np.float64), state.opacity.astype(np.float64),
                        state.colors.astype(np.float64), state.bg.astype(np.float64), state.H, state.W,
                        state.tiles_x, state.t_final.astype(np.float64), state.last, d_rgb, d_sil, pair_grad)
    per_g = np.zeros((n, 9))
    np.add.at(per_g, state.pair_g, pair_grad)
    d_means, d_ls, d_q = projection_backward(proj, state.camera, per_g[:, 0:2], per_g[:, 2:5])
    return RenderGradients(d_means, d_ls, d_q, per_g[:, 5], per_g[:, 6:9])
