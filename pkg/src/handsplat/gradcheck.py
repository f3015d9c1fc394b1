"""Finite-difference verification of every analytic gradient in the package.

Each check compares reverse-mode gradients with central differences
(step 1e-5, float64).  The renderer has jump discontinuities where a pixel
enters or leaves a Gaussian's 3-sigma ellipse, hits the opacity clamp or
the early-exit; if the central stencil straddles one (detected through the
per-pixel support signature) a one-sided second-order difference on the
clean side is used instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import features as F
from . import graph as G
from .gaussians import GaussianCloud, init_head_weights, predict_attributes
from .hand_model import PoseParams
from .optimize import l1_loss, mask_loss, perceptual_loss
from .pipeline import AvatarTemplate, forward, frame_inputs
from .rasterizer import look_at, render_arrays, render_backward

STEP = 1e-5


def rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    n_one_sided: int = 0


def _pick(rng, shape, k):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def check_graph(name: str, build, inputs: dict, rng, k: int = 12, h: float = STEP) -> CheckResult:
    """``build(vars)`` returns a scalar Var; checks d/d every array in ``inputs``."""
    vars_ = {key: G.param(v) for key, v in inputs.items()}
    out = build(vars_)
    G.backward(out)
    grads = {key: (v.grad if v.grad is not None else np.zeros_like(v.value)) for key, v in vars_.items()}
    scale = max(max(float(np.abs(g).max()) for g in grads.values()), 1e-12)
    worst, n = 0.0, 0
    for key, arr in inputs.items():
        for idx in _pick(rng, arr.shape, k):
            def f(delta):
                vals = {kk: vv.copy() for kk, vv in inputs.items()}
                vals[key][idx] += delta
                return float(build({kk: G.const(vv) for kk, vv in vals.items()}).value)
            num = (f(h) - f(-h)) / (2 * h)
            worst = max(worst, rel_err(float(grads[key][idx]), num, 1e-6 * scale))
            n += 1
    return CheckResult(name, worst, n)


# ---------------------------------------------------------------- renderer

def random_scene(rng, n: int = 40, size: int = 32):
    means = rng.normal(0.0, 0.04, (n, 3))
    log_scales = np.log(rng.uniform(0.006, 0.02, (n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacity = rng.uniform(0.2, 0.9, n)
    colors = rng.uniform(0.0, 1.0, (n, 3))
    cam = look_at(rng.normal(0.0, 0.05, 3) + [0.0, 0.0, -0.45], [0.0, 0.0, 0.0], up=(0.0, -1.0, 0.0),
                  focal=40.0 * size / 32, width=size, height=size)
    bg = rng.uniform(0.0, 0.5, 3)
    return [means, log_scales, quats, opacity, colors], cam, bg


def check_render(rng, n: int = 40, size: int = 32, k: int = 8) -> CheckResult:
    arrays, cam, bg = random_scene(rng, n, size)
    w_rgb = rng.normal(size=(size, size, 3))
    w_m = rng.normal(size=(size, size))

    def run(arrs):
        img, st = render_arrays(*arrs, cam, bg, size, size)
        return float((img.rgb * w_rgb).sum() + (img.silhouette * w_m).sum()), st

    base, st = run(arrays)
    g = render_backward(st, w_rgb, w_m)
    grads = [g.means, g.log_scales, g.quats, g.opacity, g.colors]
    scale = max(float(np.abs(x).max()) for x in grads)
    worst, count, one_sided = 0.0, 0, 0
    for a, (arr, ga) in enumerate(zip(arrays, grads)):
        for idx in _pick(rng, arr.shape, k):
            vals = {}
            for m in (-2, -1, 1, 2):
                arrs = [x.copy() for x in arrays]
                arrs[a][idx] += m * STEP
                vals[m] = run(arrs)
            clean = {m: np.array_equal(vals[m][1].support, st.support) for m in vals}
            if clean[1] and clean[-1]:
                num = (vals[1][0] - vals[-1][0]) / (2 * STEP)
            elif clean[1] and clean[2]:
                num = (-3 * base + 4 * vals[1][0] - vals[2][0]) / (2 * STEP)
                one_sided += 1
            elif clean[-1] and clean[-2]:
                num = (3 * base - 4 * vals[-1][0] + vals[-2][0]) / (2 * STEP)
                one_sided += 1
            else:
                continue
            worst = max(worst, rel_err(float(ga[idx]), num, 1e-6 * scale))
            count += 1
    return CheckResult("render", worst, count, one_sided)


# ---------------------------------------------------------------- learned pieces

def check_losses(rng) -> list[CheckResult]:
    a = rng.uniform(0, 1, (20, 20, 3))
    b = rng.uniform(0, 1, (20, 20, 3))
    m = rng.uniform(0, 1, (12, 12))
    mr = rng.uniform(0, 1, (12, 12))
    return [
        check_graph("l1_loss", lambda v: l1_loss(v["a"], b), {"a": a}, rng),
        check_graph("perceptual_loss", lambda v: perceptual_loss(v["a"], b), {"a": a}, rng),
        check_graph("mask_loss", lambda v: mask_loss(v["m"], mr), {"m": m}, rng),
    ]


def _proj(rng, shape):
    return rng.normal(size=shape)


def check_features(rng, shape: F.NetworkShape | None = None) -> list[CheckResult]:
    shape = shape or F.NetworkShape(C=4, E=6, bands=2, map_size=6, hidden=5)
    w = F.init_weights(shape, rng)
    C, E, ms = shape.C, shape.E, shape.map_size
    res = []
    x = rng.uniform(-1, 1, (5, 2))
    P = _proj(rng, (5, 4 * shape.bands))
    res.append(check_graph("gamma_encode", lambda v: G.sum_(F.gamma_encode(v["x"], shape.bands) * P), {"x": x}, rng))
    fmap = rng.normal(size=(3, 5, 7))
    uv = rng.uniform(0, 1, (9, 2))
    P = _proj(rng, (9, 3))
    res.append(check_graph("sample_map", lambda v: G.sum_(F.sample_map(v["m"], uv) * P), {"m": fmap}, rng))

    theta = rng.normal(0, 0.3, shape.theta_dim)
    cam = rng.normal(size=25)
    summ = rng.uniform(0, 1, 2)
    P = _proj(rng, (E,))
    pw = {k: v for k, v in w.items() if k.startswith("pose.")}
    res.append(check_graph("encode_pose", lambda v: G.sum_(F.encode_pose(v["theta"], cam, summ, {**w, **{k: v[k] for k in pw}}) * P),
                           {"theta": theta, **pw}, rng))

    n = 7
    pts = rng.normal(0, 0.05, (n, 3))
    adj = (rng.uniform(size=(4, 4)) < 0.5)
    adj = adj | adj.T | np.eye(4, dtype=bool)
    pool = F.neighbourhood_matrix(rng.integers(0, 4, n), sp.csr_matrix(adj.astype(float)))
    pose_emb = rng.normal(size=E)
    P = _proj(rng, (n, C))
    gw = {k: v for k, v in w.items() if k.startswith("geo_")}
    res.append(check_graph("encode_geometry",
                           lambda v: G.sum_(F.encode_geometry(v["pts"], pool, v["emb"], {**w, **{k: v[k] for k in gw}}) * P),
                           {"pts": pts, "emb": pose_emb, **gw}, rng))

    ident = rng.normal(size=(2 * C, ms, ms))
    vuv = rng.uniform(0, 1, (15, 2))
    P = _proj(rng, (2 * C, ms, ms))
    tw = {k: v for k, v in w.items() if k.startswith("tex.")}
    res.append(check_graph("decode_texture",
                           lambda v: G.sum_(F.decode_texture(v["m"], v["emb"], vuv, np.arange(15), {**w, **{k: v[k] for k in tw}}) * P),
                           {"m": ident, "emb": pose_emb, **tw}, rng))

    t = rng.normal(size=(2 * C, ms, ms))
    dt = rng.normal(size=(C, ms, ms))
    side = rng.integers(0, 2, 9)
    P = _proj(rng, (9, C))
    res.append(check_graph("texture_features", lambda v: G.sum_(F.texture_features(v["t"], v["dt"], uv, side) * P),
                           {"t": t, "dt": dt}, rng))
    g1, g2 = rng.normal(size=(6, C)), rng.normal(size=(6, C))
    P = _proj(rng, (6, C))
    res.append(check_graph("fuse_features", lambda v: G.sum_(F.fuse_features(v["a"], v["b"]) * P), {"a": g1, "b": g2}, rng))
    flags = np.array([1, 0, 1, 1, 0, 1])
    aw = {k: v for k, v in w.items() if k.startswith("attn.")}
    res.append(check_graph("interaction_attention",
                           lambda v: G.sum_(F.interaction_attention(v["f"], flags, {**w, **{k: v[k] for k in aw}}) * P),
                           {"f": g1, **aw}, rng))
    hw = init_head_weights(rng, C, 5)
    base = rng.normal(0, 0.05, (6, 3))
    Ps = {k: _proj(rng, s) for k, s in (("means", (6, 3)), ("log_scales", (6, 3)), ("quats", (6, 4)),
                                         ("opacity", (6,)), ("colors", (6, 3)), ("validity", (6,)))}

    def heads(v):
        attrs = predict_attributes(v["f"], base, {k: v[k] for k in hw})
        return sum((G.sum_(attrs[k] * Ps[k]) for k in Ps), G.const(0.0))
    res.append(check_graph("predict_attributes", heads, {"f": g1 * 3, **hw}, rng))
    return res


# ---------------------------------------------------------------- end to end

def tiny_pipeline(rng, n_points: int = 40, size: int = 32, shape: F.NetworkShape | None = None):
    """Full template with the cloud cut down to ``n_points`` anchors and a small network."""
    shape = shape or F.NetworkShape(C=8, E=8, bands=2, map_size=8, hidden=8)
    tpl = AvatarTemplate(level=0, detection_level=0, map_size=shape.map_size)
    keep = np.sort(rng.choice(len(tpl.points), n_points, replace=False))
    tpl.set_points(tpl.points.take(keep))
    w = F.init_weights(shape, rng)
    w["head.b2"][10] = 1.5
    w["head.b2"][3:6] += 1.2   # larger splats so the sparse cloud covers pixels
    cam = look_at([0.0, 0.0, -0.55], [0.0, 0.01, 0.0], up=(0.0, -1.0, 0.0), focal=size * 1.25, width=size, height=size)
    pose = PoseParams.zeros()
    pose.theta = rng.normal(0, 0.15, pose.theta.shape)
    frame = frame_inputs(tpl, pose, cam)
    identity = rng.normal(size=(2 * shape.C, shape.map_size, shape.map_size))
    return tpl, w, frame, identity


def check_pipeline(rng, k: int = 6) -> CheckResult:
    size = 32
    tpl, w, frame, identity = tiny_pipeline(rng, size=size)
    target = rng.uniform(0, 1, (size, size, 3))
    mref = rng.uniform(0, 1, (size, size))

    def loss_of(ident):
        res = forward(tpl, w, ident, frame, H=size, W=size)
        total = l1_loss(res.rgb, target) * 10.0 + perceptual_loss(res.rgb, target) * 0.1 + mask_loss(res.mask, mref)
        attrs = res.attrs
        _, st = render_arrays(*(attrs[n].value for n in ("means", "log_scales", "quats", "opacity", "colors")),
                              frame.camera, (0.0, 0.0, 0.0), size, size)
        return total, st

    iv = G.param(identity)
    total, st0 = loss_of(iv)
    G.backward(total)
    grad = iv.grad
    # probe texels that actually influence the render
    cand = np.argwhere(np.abs(grad) > 1e-3 * np.abs(grad).max())
    picks = cand[rng.choice(len(cand), min(k, len(cand)), replace=False)]
    worst, n = 0.0, 0
    for idx in map(tuple, picks):
        vals = {}
        for m in (-1, 1):
            x = identity.copy()
            x[idx] += m * STEP
            val, st = loss_of(G.const(x))
            vals[m] = (float(val.value), np.array_equal(st.support, st0.support))
        if not (vals[1][1] and vals[-1][1]):
            continue
        num = (vals[1][0] - vals[-1][0]) / (2 * STEP)
        worst = max(worst, rel_err(float(grad[idx]), num, 1e-6 * float(np.abs(grad).max())))
        n += 1
    return CheckResult("pipeline_to_identity_texel", worst, n)


def run_suite(seeds=range(5), verbose: bool = False, print_fn=print) -> list[CheckResult]:
    """All checks on every seed; returns the worst result per check name."""
    best: dict = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        results = [check_render(rng)] + check_losses(rng) + check_features(rng) + [check_pipeline(rng)]
        for r in results:
            prev = best.get(r.name)
            if prev is None:
                best[r.name] = CheckResult(r.name, r.max_rel_err, r.n_checked, r.n_one_sided)
            else:
                prev.max_rel_err = max(prev.max_rel_err, r.max_rel_err)
                prev.n_checked += r.n_checked
                prev.n_one_sided += r.n_one_sided
            if verbose:
                print_fn(f"seed {seed} {r.name}: max rel err {r.max_rel_err:.2e} over {r.n_checked}")
    return list(best.values())
