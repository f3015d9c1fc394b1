"""Procedural two-hand rig: tube-and-cap meshes, linear blend skinning and
midpoint subdivision.

The rig stands in for a licensed parametric hand model.  It keeps the same
contract: 16 joints per hand, 48 axis-angle pose values per hand and 10
shape coefficients per hand, here acting as bone-length multipliers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

RIG_VERSION = 1
SIDES = ("left", "right")
BETA_DIM = 10
BETA_LIMIT = 3.0
BETA_SCALE = 0.05


class RigSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonRig:
    names: tuple[str, ...]
    parents: np.ndarray        # (J,), -1 for roots
    rest: np.ndarray           # (J, 3) world rest positions
    side: np.ndarray           # (J,) 0 left, 1 right
    finger: np.ndarray         # (J,) -1 for wrists
    segment: np.ndarray        # (J,) -1 for wrists

    @property
    def n_joints(self) -> int:
        return len(self.names)

    @property
    def joints_per_hand(self) -> int:
        return self.n_joints // 2

    @property
    def roots(self) -> np.ndarray:
        return np.nonzero(self.parents < 0)[0]

    def bind_transforms(self) -> np.ndarray:
        """Rest-pose joint frames (identity rotation, translation to the joint)."""
        out = np.tile(np.eye(4), (self.n_joints, 1, 1))
        out[:, :3, 3] = self.rest
        return out


@dataclass(frozen=True)
class HandMesh:
    vertices: np.ndarray       # (V, 3)
    faces: np.ndarray          # (F, 3)
    uv: np.ndarray             # (V, 2)
    weights: np.ndarray        # (V, J)
    side: np.ndarray           # (V,)
    # one array per subdivision level: index of each vertex's nearest vertex one level coarser
    lineage: tuple = field(default=())

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def level(self) -> int:
        return len(self.lineage)

    def ancestors(self, level: int) -> np.ndarray:
        """Map every vertex to its nearest vertex on the mesh ``level`` subdivisions deep."""
        if not 0 <= level <= self.level:
            raise ValueError(f"level {level} outside [0, {self.level}]")
        idx = np.arange(self.n_vertices)
        for parents in reversed(self.lineage[level:]):
            idx = parents[idx]
        return idx

    def validate(self) -> None:
        if self.faces.size and self.faces.max() >= self.n_vertices:
            raise ValueError("face index out of range")
        if np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-6) or np.any(self.weights < 0):
            raise ValueError("skinning weights are not a probability simplex")
        if np.any(self.uv < 0.0) or np.any(self.uv > 1.0):
            raise ValueError("uv outside the unit square")


@dataclass
class PoseParams:
    theta: np.ndarray          # (2, 48) axis-angle per joint, per hand
    beta: np.ndarray           # (2, 10)
    root_rot: np.ndarray       # (2, 3) axis-angle
    root_trans: np.ndarray     # (2, 3)

    @classmethod
    def zeros(cls) -> "PoseParams":
        return cls(np.zeros((2, 48)), np.zeros((2, BETA_DIM)), np.zeros((2, 3)), np.zeros((2, 3)))

    def validate(self) -> None:
        for name in ("theta", "beta", "root_rot", "root_trans"):
            a = getattr(self, name)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite {name}")
        if self.theta.shape != (2, 48) or self.beta.shape != (2, BETA_DIM):
            raise ValueError("pose parameter shape mismatch")
        if np.any(np.abs(self.beta) > BETA_LIMIT):
            raise ValueError(f"beta outside [-{BETA_LIMIT}, {BETA_LIMIT}]")

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("theta", "beta", "root_rot", "root_trans")}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseParams":
        return cls(*(np.asarray(d[k], dtype=np.float64).reshape(s)
                     for k, s in (("theta", (2, 48)), ("beta", (2, BETA_DIM)),
                                  ("root_rot", (2, 3)), ("root_trans", (2, 3)))))


@dataclass(frozen=True)
class PointSet:
    """Mesh vertices reinterpreted as initial Gaussian centres."""
    positions: np.ndarray
    uv: np.ndarray
    side: np.ndarray
    vertex_id: np.ndarray

    def __len__(self):
        return len(self.positions)


# ---------------------------------------------------------------- rig spec

def load_rig_spec(path: str | Path | None = None) -> dict:
    if path is None:
        text = resources.files("handsplat").joinpath("data/default_rig.json").read_text()
    else:
        text = Path(path).read_text()
    spec = json.loads(text)
    if spec.get("rig_version") != RIG_VERSION:
        raise RigSpecError(f"unsupported rig_version {spec.get('rig_version')!r} (expected {RIG_VERSION})")
    return spec


def _ordered_joints(joints: list[dict]) -> list[dict]:
    by_name = {}
    for j in joints:
        if j["name"] in by_name:
            raise RigSpecError(f"duplicate joint {j['name']!r}")
        by_name[j["name"]] = j
    roots = [j for j in joints if j.get("parent") is None]
    if len(roots) != 1:
        raise RigSpecError(f"expected exactly one root joint per hand, got {len(roots)}")
    for j in joints:
        p = j.get("parent")
        if p is not None and p not in by_name:
            raise RigSpecError(f"joint {j['name']!r} has unknown parent {p!r}")
        # walk to the root; revisiting a joint means a cycle
        seen, cur = {j["name"]}, p
        while cur is not None:
            if cur in seen:
                raise RigSpecError(f"cycle in joint tree through joint {j['name']!r}")
            seen.add(cur)
            cur = by_name[cur].get("parent")
        if p is not None and not np.linalg.norm(j["offset"]) > 0.0:
            raise RigSpecError(f"joint {j['name']!r} has nonpositive bone length")
        if "tip" in j and not np.linalg.norm(j["tip"]) > 0.0:
            raise RigSpecError(f"joint {j['name']!r} has nonpositive tip length")
        if not j.get("radius", 0.0) > 0.0:
            raise RigSpecError(f"joint {j['name']!r} has nonpositive radius")
    order, placed = [], set()
    while len(order) < len(joints):
        for j in joints:
            if j["name"] not in placed and (j.get("parent") is None or j["parent"] in placed):
                order.append(j)
                placed.add(j["name"])
    return order


def _tube(p0, p1, radius, segments, rings):
    axis = p1 - p0
    length = np.linalg.norm(axis)
    a = axis / length
    ref = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(a, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ts = np.linspace(0.0, 1.0, rings)
    ring_pts = (p0 + ts[:, None, None] * axis
                + radius * (np.cos(ang)[None, :, None] * e1 + np.sin(ang)[None, :, None] * e2))
    verts = np.concatenate([ring_pts.reshape(-1, 3), p0[None], p1[None]])
    # u folds the angle so both sides of the tube share texture columns (no seam)
    fold = np.abs(ang / np.pi - 1.0)
    rv = (np.arange(rings) + 1.0) / (rings + 1.0)
    uv = np.concatenate([
        np.stack(np.broadcast_arrays(fold[None, :], rv[:, None]), axis=-1).reshape(-1, 2),
        [[0.5, 0.0], [0.5, 1.0]]])
    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            a0 = r * segments + s
            a1 = r * segments + (s + 1) % segments
            b0, b1 = a0 + segments, a1 + segments
            faces += [(a0, a1, b1), (a0, b1, b0)]
    c0, c1 = rings * segments, rings * segments + 1
    last = (rings - 1) * segments
    for s in range(segments):
        faces.append((c0, (s + 1) % segments, s))
        faces.append((c1, last + s, last + (s + 1) % segments))
    return verts, np.array(faces, dtype=np.int64), uv


def _segment_dist2(pts, p0, p1):
    d = p1 - p0
    t = np.clip(((pts - p0) @ d) / (d @ d), 0.0, 1.0)
    diff = pts - (p0 + t[:, None] * d)
    return (diff * diff).sum(axis=1)


def build_canonical_rig(rig_spec: dict | None = None) -> tuple[SkeletonRig, HandMesh]:
    """Build the interaction-free two-hand rig and its skinned tube mesh.

    Hands lie flat in the x-y plane (palms towards -z, fingers along +y),
    ``hand_separation`` metres apart.  Left-hand UVs fill u < 0.5, right-hand
    UVs fill u >= 0.5.
    """
    spec = load_rig_spec() if rig_spec is None else rig_spec
    if spec.get("rig_version") != RIG_VERSION:
        raise RigSpecError(f"unsupported rig_version {spec.get('rig_version')!r}")
    joints = _ordered_joints(spec["joints"])
    local_idx = {j["name"]: i for i, j in enumerate(joints)}
    nj = len(joints)
    seg, rings = spec["tube"]["segments"], spec["tube"]["rings"]
    cols, rows = spec["uv_layout"]["columns"], spec["uv_layout"]["rows"]
    margin = spec["uv_layout"]["margin"]
    sep, wrist_y = spec["hand_separation"], spec.get("wrist_height", 0.0)

    names, parents, rest, side_j, finger, segment = [], [], [], [], [], []
    verts, faces, uvs, wts, side_v = [], [], [], [], []
    n_v = 0
    for h, hand in enumerate(spec["hands"]):
        sgn = -1.0 if hand.get("mirror") else 1.0
        origin = np.array([(h - 0.5) * sep, wrist_y, 0.0])
        local = np.zeros((nj, 3))
        for i, j in enumerate(joints):
            if j.get("parent") is not None:
                local[i] = local[local_idx[j["parent"]]] + np.asarray(j["offset"], dtype=np.float64)
        world = origin + local * np.array([sgn, 1.0, 1.0])
        base = h * nj
        for i, j in enumerate(joints):
            names.append(f"{hand['side']}_{j['name']}")
            p = j.get("parent")
            parents.append(-1 if p is None else base + local_idx[p])
            side_j.append(h)
            finger.append(j.get("finger", -1))
            segment.append(j.get("segment", -1))
        rest.append(world)

        # bones: parent->child tubes owned by the parent, tip tubes owned by the leaf
        bones = []
        for i, j in enumerate(joints):
            if j.get("parent") is not None:
                pi = local_idx[j["parent"]]
                bones.append((pi, world[pi], world[i], joints[pi]["radius"]))
            if "tip" in j:
                tip = world[i] + np.asarray(j["tip"]) * np.array([sgn, 1.0, 1.0])
                bones.append((i, world[i], tip, j["radius"]))
        if len(bones) > cols * rows:
            raise RigSpecError("uv layout has fewer cells than bones")
        hv = []
        hand_tube_ids = []
        for b, (owner, p0, p1, rad) in enumerate(bones):
            tv, tf, tuv = _tube(p0, p1, rad, seg, rings)
            if sgn < 0:
                tf = tf[:, ::-1]
            cu, cv = b % cols, b // cols
            cw, ch = 0.5 / cols, 1.0 / rows
            u = h * 0.5 + cu * cw + margin + tuv[:, 0] * (cw - 2 * margin)
            v = cv * ch + margin + tuv[:, 1] * (ch - 2 * margin)
            faces.append(tf + n_v)
            uvs.append(np.stack([u, v], axis=1))
            hv.append(tv)
            hand_tube_ids.append(np.full(len(tv), b))
            n_v += len(tv)
        hv = np.concatenate(hv)
        tube_of = np.concatenate(hand_tube_ids)
        # distance-to-bone falloff, normalised per vertex
        d2 = np.stack([_segment_dist2(hv, p0, p1) for (_, p0, p1, _) in bones], axis=1)
        own_r = np.array([bones[t][3] for t in tube_of])
        sigma2 = (0.6 * own_r) ** 2
        logits = -(d2 - d2.min(axis=1, keepdims=True)) / sigma2[:, None]
        bw = np.exp(logits)
        bw[bw < 1e-6] = 0.0
        w = np.zeros((len(hv), 2 * nj))
        for b, (owner, *_rest) in enumerate(bones):
            w[:, base + owner] += bw[:, b]
        w /= w.sum(axis=1, keepdims=True)
        verts.append(hv)
        wts.append(w)
        side_v.append(np.full(len(hv), h))

    rig = SkeletonRig(tuple(names), np.array(parents), np.concatenate(rest), np.array(side_j),
                      np.array(finger), np.array(segment))
    mesh = HandMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(uvs),
                    np.concatenate(wts), np.concatenate(side_v))
    mesh.validate()
    return rig, mesh


# ---------------------------------------------------------------- skinning

def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    k = aa / safe
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], axis=-1).reshape(aa.shape[:-1] + (3, 3))
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    R = np.eye(3) + s * K + (1.0 - c) * (K @ K)
    return np.where((theta > 0)[..., None], R, np.eye(3))


def bone_multipliers(rig: SkeletonRig, beta: np.ndarray) -> np.ndarray:
    """Per-joint multiplier on the bone that ends at the joint.

    beta[0] scales the whole hand, beta[1..5] one finger each (thumb first),
    beta[6..9] one phalanx level each (palm, proximal, middle, distal).
    """
    beta = np.asarray(beta, dtype=np.float64)
    out = np.ones(rig.n_joints)
    for j in range(rig.n_joints):
        if rig.parents[j] < 0:
            continue
        b = beta[rig.side[j]]
        s = b[0] + b[1 + rig.finger[j]] + b[6 + rig.segment[j]]
        out[j] = np.exp(BETA_SCALE * s)
    return out


def shaped_joints(rig: SkeletonRig, beta: np.ndarray) -> np.ndarray:
    mult = bone_multipliers(rig, beta)
    out = rig.rest.copy()
    for j in range(rig.n_joints):
        p = rig.parents[j]
        if p >= 0:
            out[j] = out[p] + mult[j] * (rig.rest[j] - rig.rest[p])
    return out


def skinning_transforms(rig: SkeletonRig, pose: PoseParams) -> tuple[np.ndarray, np.ndarray]:
    """World skinning matrices A_j (J, 4, 4) and shaped rest joints (J, 3)."""
    jb = shaped_joints(rig, pose.beta)
    npj = rig.joints_per_hand
    local_R = rodrigues(np.asarray(pose.theta).reshape(2 * npj, 3))
    root_R = rodrigues(pose.root_rot)
    G = np.zeros((rig.n_joints, 4, 4))
    for j in range(rig.n_joints):
        T = np.eye(4)
        T[:3, :3] = local_R[j]
        p = rig.parents[j]
        if p < 0:
            T[:3, 3] = jb[j]
            G[j] = T
        else:
            T[:3, 3] = jb[j] - jb[p]
            G[j] = G[p] @ T
    A = G.copy()
    A[:, :3, 3] = G[:, :3, 3] - np.einsum("jab,jb->ja", G[:, :3, :3], jb)
    root = np.tile(np.eye(4), (2, 1, 1))
    root[:, :3, :3] = root_R
    root[:, :3, 3] = pose.root_trans
    return root[rig.side] @ A, jb


def skin_points(positions, weights, rig: SkeletonRig, pose: PoseParams, return_blend=False):
    """Linear blend skinning of arbitrary rest-space points with given weights."""
    if weights.shape[1] != rig.n_joints:
        raise ValueError(f"weight matrix has {weights.shape[1]} columns, rig has {rig.n_joints} joints")
    A, jb = skinning_transforms(rig, pose)
    shaped = positions + weights @ (jb - rig.rest)
    blend = np.einsum("vj,jab->vab", weights, A)
    out = np.einsum("vab,vb->va", blend[:, :3, :3], shaped) + blend[:, :3, 3]
    return (out, blend) if return_blend else out


def pose_mesh(mesh: HandMesh, rig: SkeletonRig, pose: PoseParams) -> HandMesh:
    return replace(mesh, vertices=skin_points(mesh.vertices, mesh.weights, rig, pose))


# ---------------------------------------------------------------- subdivision

def unique_edges(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique edges (E, 2) and, per face, the edge id of (01, 12, 20)."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    edges, inv = np.unique(e, axis=0, return_inverse=True)
    return edges, inv.reshape(3, -1).T


def upsample_mesh(mesh: HandMesh, levels: int) -> HandMesh:
    if levels < 0:
        raise ValueError("levels must be >= 0")
    for _ in range(levels):
        V = mesh.n_vertices
        edges, fe = unique_edges(mesh.faces)
        a, b = edges[:, 0], edges[:, 1]
        mids = V + np.arange(len(edges))
        w = 0.5 * (mesh.weights[a] + mesh.weights[b])
        w /= w.sum(axis=1, keepdims=True)
        f = mesh.faces
        m01, m12, m20 = mids[fe[:, 0]], mids[fe[:, 1]], mids[fe[:, 2]]
        faces = np.concatenate([
            np.stack([f[:, 0], m01, m20], 1), np.stack([m01, f[:, 1], m12], 1),
            np.stack([m20, m12, f[:, 2]], 1), np.stack([m01, m12, m20], 1)])
        mesh = HandMesh(
            vertices=np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[a] + mesh.vertices[b])]),
            faces=faces,
            uv=np.concatenate([mesh.uv, 0.5 * (mesh.uv[a] + mesh.uv[b])]),
            weights=np.concatenate([mesh.weights, w]),
            side=np.concatenate([mesh.side, mesh.side[a]]),
            # equidistant endpoints: the lower index is the nearest parent
            lineage=mesh.lineage + (np.concatenate([np.arange(V), a]),),
        )
    return mesh


def surface_area(vertices: np.ndarray, faces: np.ndarray) -> float:
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    return float(0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1).sum())


def vertex_adjacency(mesh: HandMesh) -> sp.csr_matrix:
    """Symmetric 1-ring adjacency including the diagonal."""
    f = mesh.faces
    r = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0], np.arange(mesh.n_vertices)])
    c = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2], np.arange(mesh.n_vertices)])
    A = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(mesh.n_vertices,) * 2)
    A.data[:] = 1.0
    return A


def vertices_to_points(mesh: HandMesh) -> PointSet:
    return PointSet(mesh.vertices.copy(), mesh.uv.copy(), mesh.side.copy(), np.arange(mesh.n_vertices))


def min_interhand_distance(vertices: np.ndarray, side: np.ndarray) -> float:
    left, right = vertices[side == 0], vertices[side == 1]
    best = np.inf
    for chunk in np.array_split(left, max(1, len(left) // 512)):
        d2 = ((chunk[:, None, :] - right[None, :, :]) ** 2).sum(-1)
        best = min(best, float(d2.min()))
    return float(np.sqrt(best))


def write_obj(path, mesh: HandMesh, colors: np.ndarray | None = None) -> None:
    lines = []
    for i, v in enumerate(mesh.vertices):
        if colors is None:
            lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}")
        else:
            c = colors[i]
            lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]:.3f} {c[1]:.3f} {c[2]:.3f}")
    lines += [f"vt {u:.6f} {v:.6f}" for u, v in mesh.uv]
    lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")
