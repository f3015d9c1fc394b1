"""End-to-end differentiable forward pass: pose -> Gaussians -> image."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import features as F
from . import graph as G
from .gaussians import GaussianCloud, RefinementConfig, cloud_from_attributes, predict_attributes, refine
from .hand_model import HandMesh, PoseParams, SkeletonRig, build_canonical_rig, skin_points, upsample_mesh, \
    vertex_adjacency
from .interaction import DetectionConfig, InteractionLabels, detect_interactions
from .rasterizer import Camera, render_arrays, render_backward


@dataclass
class PointState:
    """Gaussian anchor points in rest space; rows follow the current cloud."""
    canonical: np.ndarray     # (N, 3)
    uv: np.ndarray            # (N, 2)
    side: np.ndarray          # (N,)
    vertex_id: np.ndarray     # (N,) vertex of the template mesh
    weights: np.ndarray       # (N, J) skinning weights

    def __len__(self):
        return len(self.canonical)

    def take(self, idx) -> "PointState":
        return PointState(self.canonical[idx], self.uv[idx], self.side[idx], self.vertex_id[idx], self.weights[idx])


class AvatarTemplate:
    """Rig, subdivided template mesh and the sparse operators the encoders need."""

    def __init__(self, level: int = 1, detection_level: int = 1, map_size: int = 64,
                 rig: SkeletonRig | None = None, coarse: HandMesh | None = None):
        if detection_level > level:
            raise ValueError("detection level must not exceed the template level")
        if rig is None or coarse is None:
            rig, coarse = build_canonical_rig()
        self.rig = rig
        self.coarse = coarse
        self.level = level
        self.detection_level = detection_level
        self.map_size = map_size
        self.mesh = upsample_mesh(coarse, level)
        self.detect_mesh = upsample_mesh(coarse, detection_level)
        self.coarse_adj = vertex_adjacency(coarse)
        self.coarse_of = self.mesh.ancestors(0)
        self.detect_of = self.mesh.ancestors(detection_level)
        self.vertex_interp = F.bilinear_matrix(self.mesh.uv, map_size, map_size)
        self.set_points(PointState(self.mesh.vertices.copy(), self.mesh.uv.copy(), self.mesh.side.copy(),
                                   np.arange(self.mesh.n_vertices), self.mesh.weights.copy()))

    def set_points(self, points: PointState) -> None:
        self.points = points
        self.pool = F.neighbourhood_matrix(self.coarse_of[points.vertex_id], self.coarse_adj)
        self.point_interp = F.bilinear_matrix(points.uv, self.map_size, self.map_size)

    def reset_points(self) -> None:
        self.set_points(PointState(self.mesh.vertices.copy(), self.mesh.uv.copy(), self.mesh.side.copy(),
                                   np.arange(self.mesh.n_vertices), self.mesh.weights.copy()))

    def posed_points(self, pose: PoseParams) -> np.ndarray:
        return skin_points(self.points.canonical, self.points.weights, self.rig, pose)

    def detect(self, pose: PoseParams, cfg: DetectionConfig = DetectionConfig()) -> InteractionLabels:
        """Labels on the detection mesh, inherited by every current point through its vertex."""
        canon = self.detect_mesh.vertices
        posed = skin_points(canon, self.detect_mesh.weights, self.rig, pose)
        coarse_labels = detect_interactions(canon, posed, cfg, self.detect_mesh.side)
        src = self.detect_of[self.points.vertex_id]
        return InteractionLabels(coarse_labels.flags[src], self.points.side.copy(), coarse_labels.cross[src])


@dataclass
class FrameInputs:
    pose: PoseParams
    camera: Camera
    labels: InteractionLabels


@dataclass
class ForwardResult:
    image: G.Var                  # (H, W, 4): rgb then silhouette
    attrs: dict
    labels: InteractionLabels
    pose_emb: G.Var
    extras: dict = field(default_factory=dict)

    @property
    def rgb(self) -> G.Var:
        return self.image[:, :, :3]

    @property
    def mask(self) -> G.Var:
        return self.image[:, :, 3]


def render_var(attrs: dict, camera: Camera, bg, H: int, W: int) -> G.Var:
    """Graph node for the rasterizer: value (H, W, 4), adjoint from :func:`render_backward`."""
    names = ("means", "log_scales", "quats", "opacity", "colors")
    img, state = render_arrays(*(attrs[k].value for k in names), camera, bg, H, W)
    value = np.concatenate([img.rgb, img.silhouette[..., None]], axis=2)

    def fn(g):
        gr = render_backward(state, g[..., :3], g[..., 3])
        return gr.means, gr.log_scales, gr.quats, gr.opacity, gr.colors
    return G.custom(value, [attrs[k] for k in names], fn, "render")


def pose_embedding(weights: dict, frame: FrameInputs) -> G.Var:
    return F.encode_pose(frame.pose.theta, F.camera_vector(frame.camera), frame.labels.fractions(), weights)


def geometry_features(tpl: AvatarTemplate, weights: dict, frame: FrameInputs, pose_emb=None) -> tuple[np.ndarray, G.Var]:
    posed = tpl.posed_points(frame.pose)
    if pose_emb is None:
        pose_emb = pose_embedding(weights, frame)
    return posed, F.encode_geometry(posed, tpl.pool, pose_emb, weights)


def forward(tpl: AvatarTemplate, weights: dict, identity, frame: FrameInputs, *, delta_t=None,
            use_attention: bool = True, bg=(0.0, 0.0, 0.0), H: int = 64, W: int = 64,
            offset_radius: float = 0.005, cached: dict | None = None) -> ForwardResult:
    """Full differentiable pipeline for one frame.

    ``identity`` is the (2C, H_m, W_m) identity slice, ``weights`` maps
    names to arrays (frozen) or :func:`graph.param` leaves (trained).
    ``cached`` may carry a precomputed ``pose_emb`` / ``geo`` / ``posed``
    when the network is frozen.
    """
    cached = cached or {}
    pose_emb = cached.get("pose_emb")
    if pose_emb is None:
        pose_emb = pose_embedding(weights, frame)
    if "geo" in cached:
        posed, geo = cached["posed"], cached["geo"]
    else:
        posed, geo = geometry_features(tpl, weights, frame, pose_emb)
    t = F.decode_texture(identity, pose_emb, tpl.mesh.uv, np.arange(tpl.mesh.n_vertices), weights,
                         tpl.vertex_interp)
    tex = F.texture_features(t, delta_t, tpl.points.uv, tpl.points.side, tpl.point_interp)
    f = F.fuse_features(geo, tex)
    if use_attention:
        f = F.interaction_attention(f, frame.labels.flags, weights)
    attrs = predict_attributes(f, posed, weights, offset_radius=offset_radius)
    image = render_var(attrs, frame.camera, bg, H, W)
    return ForwardResult(image, attrs, frame.labels, pose_emb, {"texture": t})


def frame_inputs(tpl: AvatarTemplate, pose: PoseParams, camera: Camera,
                 cfg: DetectionConfig = DetectionConfig()) -> FrameInputs:
    return FrameInputs(pose, camera, tpl.detect(pose, cfg))


def current_cloud(result: ForwardResult, tpl: AvatarTemplate) -> GaussianCloud:
    p = tpl.points
    return cloud_from_attributes(result.attrs, p.uv, p.side, p.vertex_id)


def refine_points(tpl: AvatarTemplate, result: ForwardResult, cfg: RefinementConfig = RefinementConfig()):
    """Prune/split the anchor points using the validities of ``result``.

    Split children are re-anchored at their parent's rest position shifted
    by the child's displacement from the parent mean.
    """
    cloud = current_cloud(result, tpl)
    out, origin = refine(cloud, cfg, return_origin=True)
    pts = tpl.points.take(origin)
    shift = out.means - cloud.means[origin]
    pts.canonical = pts.canonical + shift
    tpl.set_points(pts)
    return out, origin
