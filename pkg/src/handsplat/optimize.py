"""Losses, Adam and the two optimisation stages (multi-subject training, one-shot fitting)."""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from .features import NetworkShape
from .pipeline import AvatarTemplate, FrameInputs, forward, geometry_features, pose_embedding

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 10.0
    vgg: float = 0.1
    mask: float = 1.0
    reg: float = 0.01

    def __post_init__(self):
        if min(self.rgb, self.vgg, self.mask, self.reg) < 0:
            raise ValueError("loss weights must be nonnegative")


# ---------------------------------------------------------------- losses

def _same_shape(a: G.Var, b: G.Var):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def l1_loss(img, target) -> G.Var:
    img, target = G._wrap(img), G._wrap(target)
    _same_shape(img, target)
    return G.mean(G.abs_(img - target))


def mask_loss(mask, mask_ref) -> G.Var:
    mask, mask_ref = G._wrap(mask), G._wrap(mask_ref)
    _same_shape(mask, mask_ref)
    return G.mean(G.square(mask - mask_ref))


class FilterBank:
    """Fixed random 3x3 filters at two scales standing in for a pretrained feature network."""

    def __init__(self, seed: int = 1234, channels: int = 3, width: int = 8):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / (9 * channels)), (9 * channels, width))
        self.w2 = rng.normal(0.0, np.sqrt(2.0 / (9 * width)), (9 * width, width))
        self._cache = {}

    def _patches(self, h, w, c):
        key = (h, w, c)
        if key not in self._cache:
            ys, xs = np.meshgrid(np.arange(h - 2), np.arange(w - 2), indexing="ij")
            dy, dx = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
            yy = ys.reshape(-1, 1, 1) + dy.reshape(1, 9, 1)
            xx = xs.reshape(-1, 1, 1) + dx.reshape(1, 9, 1)
            cc = np.broadcast_to(np.arange(c).reshape(1, 1, c), (yy.shape[0], 9, c))
            yy = np.broadcast_to(yy, cc.shape)
            xx = np.broadcast_to(xx, cc.shape)
            self._cache[key] = (yy.reshape(len(yy), -1), xx.reshape(len(xx), -1), cc.reshape(len(cc), -1))
        return self._cache[key]

    def conv(self, x: G.Var, w: np.ndarray) -> G.Var:
        h, wd, c = x.shape
        idx = self._patches(h, wd, c)
        out = G.tanh(G.matmul(x[idx], w))
        return G.reshape(out, (h - 2, wd - 2, w.shape[1]))

    @staticmethod
    def pool(x: G.Var) -> G.Var:
        h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        x = x[: 2 * h2, : 2 * w2]
        return G.mean(G.reshape(x, (h2, 2, w2, 2, c)), axis=(1, 3))

    def features(self, img: G.Var) -> list[G.Var]:
        f1 = self.conv(img, self.w1)
        f2 = self.conv(self.pool(f1), self.w2)
        return [f1, f2]


_DEFAULT_BANK = FilterBank()


def perceptual_loss(img, target, bank: FilterBank = _DEFAULT_BANK) -> G.Var:
    """Mean squared feature difference, averaged over the two scales."""
    img, target = G._wrap(img), G._wrap(target)
    _same_shape(img, target)
    if img.shape[0] < 16 or img.shape[1] < 16:
        raise ValueError("perceptual loss needs images of at least 16x16")
    fa, fb = bank.features(img), bank.features(target)
    terms = [G.mean(G.square(a - b)) for a, b in zip(fa, fb)]
    return (terms[0] + terms[1]) * 0.5


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(img) - np.asarray(ref)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


# ---------------------------------------------------------------- Adam

@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)


def adam_update(params: dict, grads: dict, state: OptimState, lr: float | None = None) -> dict:
    """In-place bias-corrected Adam on every block that has a gradient.

    Blocks whose gradient contains a NaN are left alone and the event is logged.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; step skipped for this block", name)
            state.skipped.append(name)
            continue
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.step[name] = 0
        state.step[name] += 1
        t = state.step[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


# ---------------------------------------------------------------- colour calibration

@dataclass
class ColorCalibration:
    log_gain: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def gain(self) -> np.ndarray:
        return np.exp(self.log_gain)

    def apply(self, rgb: np.ndarray, mask: np.ndarray, bg=(0.0, 0.0, 0.0)) -> np.ndarray:
        m = mask[..., None]
        fg = rgb - (1.0 - m) * np.asarray(bg, dtype=np.float64)
        return rgb + fg * (self.gain - 1.0) + m * self.bias


def calibrate(rgb: G.Var, mask: G.Var, log_gain, bias, bg=(0.0, 0.0, 0.0)) -> G.Var:
    """Per-channel gain and bias on the splatted foreground; the background stays put.

    Written as rgb + fg*(gain - 1) + bias*M so zero parameters return rgb exactly.
    """
    m = G.reshape(mask, mask.shape + (1,))
    fg = rgb - (1.0 - m) * np.asarray(bg, dtype=np.float64)
    return rgb + fg * (G.exp(log_gain) - 1.0) + m * bias


# ---------------------------------------------------------------- stage one

@dataclass
class TrainSample:
    frame: FrameInputs
    target: np.ndarray        # (H, W, 3)
    subject: int              # 1-based


def stage_one_loss(result, target, lw: LossWeights) -> tuple[G.Var, dict]:
    l1 = l1_loss(result.rgb, target)
    lp = perceptual_loss(result.rgb, target)
    total = l1 * lw.rgb + lp * lw.vgg
    return total, {"l1": float(l1.value), "perceptual": float(lp.value), "total": float(total.value)}


def stage1_step(batch: list[TrainSample], tpl: AvatarTemplate, weights: dict, identity: np.ndarray,
                state: OptimState, lr: float | None = None, lw: LossWeights = LossWeights(),
                use_attention: bool = True, bg=(0.0, 0.0, 0.0)) -> dict:
    """One Adam step on the network and the identity slices of the batch's subjects.

    ``identity`` is the (S, 2C, H, W) stack; only rows of subjects present in
    the batch receive gradients and updates.
    """
    S = identity.shape[0]
    for s in batch:
        if not 1 <= s.subject <= S:
            raise ValueError(f"unknown subject id {s.subject}")
    wvars = {k: G.param(v) for k, v in weights.items()}
    subjects = sorted({s.subject for s in batch})
    ivars = {k: G.param(identity[k - 1]) for k in subjects}
    terms = {"l1": 0.0, "perceptual": 0.0, "total": 0.0}
    total = None
    for s in batch:
        H, W = s.target.shape[:2]
        res = forward(tpl, wvars, ivars[s.subject], s.frame, use_attention=use_attention, bg=bg, H=H, W=W)
        loss, t = stage_one_loss(res, s.target, lw)
        total = loss if total is None else total + loss
        for k in terms:
            terms[k] += t[k] / len(batch)
    total = total * (1.0 / len(batch))
    G.backward(total)
    params = dict(weights)
    grads = {k: v.grad for k, v in wvars.items()}
    for k in subjects:
        name = f"identity.s{k}"
        params[name] = identity[k - 1]
        grads[name] = ivars[k].grad
    adam_update(params, grads, state, lr)
    return terms


def train_stage_one(samples: list[TrainSample], tpl: AvatarTemplate, weights: dict, identity: np.ndarray,
                    steps: int, lr: float = 1e-4, *, batch_size: int = 1, seed: int = 0,
                    lw: LossWeights = LossWeights(), use_attention: bool = True, bg=(0.0, 0.0, 0.0),
                    state: OptimState | None = None, callback=None) -> list[dict]:
    """Run ``steps`` stage-one updates over a seeded shuffle of ``samples``; returns the loss trace."""
    rng = np.random.default_rng(seed)
    state = state or OptimState(lr=lr)
    order = np.array([], dtype=np.int64)
    trace = []
    for step in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(len(samples))])
        pick, order = order[:batch_size], order[batch_size:]
        terms = stage1_step([samples[i] for i in pick], tpl, weights, identity, state, lr, lw, use_attention, bg)
        trace.append(terms)
        if callback is not None:
            callback(step, terms)
    return trace


def evaluate_stage_one(samples: list[TrainSample], tpl: AvatarTemplate, weights: dict, identity: np.ndarray,
                       lw: LossWeights = LossWeights(), use_attention: bool = True, bg=(0.0, 0.0, 0.0)) -> float:
    """Mean stage-one objective over ``samples`` without updating anything."""
    total = 0.0
    for s in samples:
        H, W = s.target.shape[:2]
        res = forward(tpl, weights, identity[s.subject - 1], s.frame, use_attention=use_attention, bg=bg, H=H, W=W)
        total += stage_one_loss(res, s.target, lw)[1]["total"]
    return total / len(samples)


# ---------------------------------------------------------------- stage two

@dataclass
class FitReport:
    trace: list            # per step: dict of loss terms before that step's update
    initial: dict
    final: dict
    final_psnr: float
    wall_time: float
    steps: int


@dataclass
class FitResult:
    identity: np.ndarray      # m*, (2C, H, W)
    delta_t: np.ndarray       # (C, H, W)
    calibration: ColorCalibration
    report: FitReport
    render: np.ndarray        # final calibrated rgb


def weights_checksum(weights: dict) -> str:
    import hashlib
    h = hashlib.sha256()
    for k in sorted(weights):
        h.update(k.encode())
        h.update(np.ascontiguousarray(weights[k]).tobytes())
    return h.hexdigest()


def fit_one_shot(tpl: AvatarTemplate, weights: dict, frame: FrameInputs, ref_image: np.ndarray,
                 ref_mask: np.ndarray | None = None, *, steps: int = 50, lr: float = 1e-2,
                 lw: LossWeights = LossWeights(), calibrate_color: bool = True, use_attention: bool = True,
                 bg=(0.0, 0.0, 0.0)) -> FitResult:
    """Invert a single reference view into an identity map, a texture bias and a colour calibration.

    The network weights are read-only here; only m*, dt and the six
    calibration numbers are optimised.
    """
    t0 = time.perf_counter()
    shape_C = weights["geo_point.w2"].shape[1]
    ms = tpl.map_size
    H, W = ref_image.shape[:2]
    checksum = weights_checksum(weights)
    pose_emb = pose_embedding(weights, frame)
    posed, geo = geometry_features(tpl, weights, frame, pose_emb)
    cached = {"pose_emb": pose_emb, "posed": posed, "geo": geo}
    params = {
        "identity": np.zeros((2 * shape_C, ms, ms)),
        "delta_t": np.zeros((shape_C, ms, ms)),
        "log_gain": np.zeros(3),
        "bias": np.zeros(3),
    }
    if ref_mask is None:
        warnings.warn("no reference mask given; using the silhouette of the initial render", stacklevel=2)
        res0 = forward(tpl, weights, params["identity"], frame, delta_t=params["delta_t"],
                       use_attention=use_attention, bg=bg, H=H, W=W, cached=cached)
        ref_mask = res0.mask.value.copy()
    state = OptimState(lr=lr)

    def evaluate(p, need_grad):
        v = {k: (G.param(a) if need_grad else G.const(a)) for k, a in p.items()}
        res = forward(tpl, weights, v["identity"], frame, delta_t=v["delta_t"], use_attention=use_attention,
                      bg=bg, H=H, W=W, cached=cached)
        rgb = calibrate(res.rgb, res.mask, v["log_gain"], v["bias"], bg) if calibrate_color else res.rgb
        l1 = l1_loss(rgb, ref_image)
        lp = perceptual_loss(rgb, ref_image)
        lm = mask_loss(res.mask, ref_mask)
        lr_ = G.sum_(G.square(v["delta_t"]))
        total = l1 * lw.rgb + lp * lw.vgg + lm * lw.mask + lr_ * lw.reg
        terms = {"l1": float(l1.value), "perceptual": float(lp.value), "mask": float(lm.value),
                 "reg": float(lr_.value), "total": float(total.value)}
        return total, v, terms, rgb.value

    trace = []
    initial = None
    for _ in range(steps):
        total, v, terms, _ = evaluate(params, True)
        if initial is None:
            initial = terms
        trace.append(terms)
        G.backward(total)
        grads = {k: v[k].grad for k in params}
        if not calibrate_color:
            grads["log_gain"] = grads["bias"] = None
        adam_update(params, grads, state)
    _, _, final, rgb = evaluate(params, False)
    if initial is None:
        initial = final
    if weights_checksum(weights) != checksum:
        raise RuntimeError("network weights changed during fitting")
    report = FitReport(trace, initial, final, psnr(rgb, ref_image), time.perf_counter() - t0, steps)
    calib = ColorCalibration(params["log_gain"].copy(), params["bias"].copy())
    return FitResult(params["identity"], params["delta_t"], calib, report, rgb)


def write_trace_csv(path, trace: list) -> None:
    import csv
    if not trace:
        keys = ["total"]
    else:
        keys = list(trace[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + keys)
        for i, t in enumerate(trace):
            w.writerow([i] + [repr(t[k]) for k in keys])


__all__ = ["LossWeights", "l1_loss", "mask_loss", "perceptual_loss", "FilterBank", "psnr", "OptimState",
           "adam_update", "ColorCalibration", "calibrate", "TrainSample", "stage1_step", "train_stage_one", "evaluate_stage_one", "FitReport",
           "FitResult", "fit_one_shot", "weights_checksum", "write_trace_csv", "NetworkShape"]
