"""Miniature linear-blend-skinning body model and attachment binding."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kinematics import PoseFrame, Skeleton, fk_global_rotations

# (name, parent name, T-pose position) for the full 24-joint layout; +z up, left is +x.
JOINT_LAYOUT = [
    ("pelvis", None, (0.0, 0.0, 0.95)),
    ("L_hip", "pelvis", (0.09, 0.0, 0.88)),
    ("R_hip", "pelvis", (-0.09, 0.0, 0.88)),
    ("spine1", "pelvis", (0.0, 0.0, 1.05)),
    ("L_knee", "L_hip", (0.10, 0.0, 0.50)),
    ("R_knee", "R_hip", (-0.10, 0.0, 0.50)),
    ("spine2", "spine1", (0.0, 0.0, 1.18)),
    ("L_ankle", "L_knee", (0.10, 0.0, 0.09)),
    ("R_ankle", "R_knee", (-0.10, 0.0, 0.09)),
    ("spine3", "spine2", (0.0, 0.0, 1.30)),
    ("L_foot", "L_ankle", (0.10, -0.12, 0.03)),
    ("R_foot", "R_ankle", (-0.10, -0.12, 0.03)),
    ("neck", "spine3", (0.0, 0.0, 1.50)),
    ("L_collar", "spine3", (0.07, 0.0, 1.43)),
    ("R_collar", "spine3", (-0.07, 0.0, 1.43)),
    ("head", "neck", (0.0, 0.0, 1.65)),
    ("L_shoulder", "L_collar", (0.18, 0.0, 1.42)),
    ("R_shoulder", "R_collar", (-0.18, 0.0, 1.42)),
    ("L_elbow", "L_shoulder", (0.45, 0.0, 1.42)),
    ("R_elbow", "R_shoulder", (-0.45, 0.0, 1.42)),
    ("L_wrist", "L_elbow", (0.70, 0.0, 1.42)),
    ("R_wrist", "R_elbow", (-0.70, 0.0, 1.42)),
    ("L_hand", "L_wrist", (0.80, 0.0, 1.42)),
    ("R_hand", "R_wrist", (-0.80, 0.0, 1.42)),
]

# Leaves are stripped in this order to shrink the layout; each entry is a leaf when removed.
_REMOVAL_ORDER = [
    "L_hand", "R_hand", "head", "L_foot", "R_foot", "L_wrist", "R_wrist", "L_elbow", "R_elbow",
    "L_shoulder", "R_shoulder", "L_collar", "R_collar", "neck", "L_ankle", "R_ankle",
    "L_knee", "R_knee", "spine3", "spine2",
]

# singular value of every shape direction's effect on the stacked T-pose joints
SHAPE_JOINT_SCALE = 0.3

_RING_RADIUS = {"pelvis": 0.13, "spine1": 0.13, "spine2": 0.13, "spine3": 0.12, "neck": 0.06, "head": 0.09}


class BodyModelError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LbsBodyModel:
    template_vertices: np.ndarray  # (V, 3)
    shape_blendshapes: np.ndarray  # (K, V, 3)
    joint_regressor: np.ndarray  # (J, V)
    skinning_weights: np.ndarray  # (V, J)
    skeleton: Skeleton

    def __post_init__(self):
        for name in ("template_vertices", "shape_blendshapes", "joint_regressor", "skinning_weights"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        v, s = self.template_vertices, self.shape_blendshapes
        reg, w = self.joint_regressor, self.skinning_weights
        n_v, n_j = v.shape[0], len(self.skeleton)
        if v.ndim != 2 or v.shape[1] != 3:
            raise BodyModelError("template_vertices must be (V, 3)")
        if s.ndim != 3 or s.shape[1:] != (n_v, 3):
            raise BodyModelError("shape_blendshapes must be (K, V, 3)")
        if reg.shape != (n_j, n_v) or w.shape != (n_v, n_j):
            raise BodyModelError("regressor must be (J, V) and skinning weights (V, J)")
        if not n_v >= n_j >= 2:
            raise BodyModelError("need V >= J >= 2")
        for label, m in (("regressor", reg), ("skinning", w)):
            if (m < 0).any() or np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-9:
                raise BodyModelError(f"{label} rows must be non-negative and sum to 1")

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return len(self.skeleton)

    @property
    def n_shapes(self) -> int:
        return self.shape_blendshapes.shape[0]

    def to_dict(self) -> dict:
        return {
            "template_vertices": self.template_vertices.tolist(),
            "shape_blendshapes": self.shape_blendshapes.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
            "skinning_weights": self.skinning_weights.tolist(),
            "skeleton": self.skeleton.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LbsBodyModel":
        return cls(
            np.asarray(d["template_vertices"], dtype=float),
            np.asarray(d["shape_blendshapes"], dtype=float).reshape(-1, len(d["template_vertices"]), 3),
            np.asarray(d["joint_regressor"], dtype=float),
            np.asarray(d["skinning_weights"], dtype=float),
            Skeleton.from_dict(d["skeleton"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "LbsBodyModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class BodyParams:
    beta: np.ndarray
    theta: PoseFrame

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(self.beta))


@dataclass(frozen=True, eq=False)
class LbsOutput:
    vertices: np.ndarray
    joints: np.ndarray


@dataclass(frozen=True, eq=False)
class AttachmentBinding:
    body_vertex_index: np.ndarray  # (N,) int
    rest_offset: np.ndarray  # (N, 3), model frame at T-pose

    def __len__(self):
        return len(self.body_vertex_index)


def _check_beta(model: LbsBodyModel, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (model.n_shapes,):
        raise BodyModelError(f"beta has shape {beta.shape}, model expects ({model.n_shapes},)")
    return beta


def shaped_template(model: LbsBodyModel, beta) -> np.ndarray:
    beta = _check_beta(model, beta)
    return model.template_vertices + np.tensordot(beta, model.shape_blendshapes, axes=1)


def regress_joints(model: LbsBodyModel, vertices) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=float)
    if vertices.shape != (model.n_vertices, 3):
        raise BodyModelError(f"expected ({model.n_vertices}, 3) vertices, got {vertices.shape}")
    return model.joint_regressor @ vertices


def rest_joints(model: LbsBodyModel, beta) -> np.ndarray:
    """Joints regressed from the shaped T-pose."""
    return regress_joints(model, shaped_template(model, beta))


def shaped_skeleton(model: LbsBodyModel, beta) -> Skeleton:
    s = model.skeleton
    return Skeleton.from_joint_positions(s.names, s.parents, rest_joints(model, beta), s.pelvis_index)


def _check_pose(model: LbsBodyModel, pose: PoseFrame) -> None:
    if len(pose) != model.n_joints:
        raise BodyModelError(f"pose has {len(pose)} rotations, model has {model.n_joints} joints")


def _skinning_transforms(model: LbsBodyModel, beta, pose: PoseFrame):
    """Per-joint (rotation matrices, translations) mapping shaped rest space to posed space."""
    _check_pose(model, pose)
    skel = shaped_skeleton(model, beta)
    rest = skel.rest_joint_positions()
    mats = np.stack([g.as_matrix() for g in fk_global_rotations(skel, pose)])
    posed = np.zeros_like(rest)
    for i, p in enumerate(skel.parents):
        posed[i] = pose.root_translation + skel.offsets[i] if p is None else posed[p] + mats[p] @ skel.offsets[i]
    trans = posed - np.einsum("jab,jb->ja", mats, rest)
    return mats, trans, posed


def posed_joints(model: LbsBodyModel, beta, pose: PoseFrame) -> np.ndarray:
    return _skinning_transforms(model, beta, pose)[2]


def lbs_forward(model: LbsBodyModel, params: BodyParams) -> LbsOutput:
    verts = shaped_template(model, params.beta)
    mats, trans, posed = _skinning_transforms(model, params.beta, params.theta)
    per_joint = np.einsum("jab,vb->vja", mats, verts) + trans[None, :, :]
    out = np.einsum("vj,vja->va", model.skinning_weights, per_joint)
    return LbsOutput(out, posed)


def bind_attachment(model: LbsBodyModel, attachment_vertices) -> AttachmentBinding:
    """Bind each attachment vertex to its nearest T-pose template vertex (lowest index on ties)."""
    pts = np.asarray(attachment_vertices, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise BodyModelError("attachment has no vertices")
    tmpl = model.template_vertices
    d2 = ((pts[:, None, :] - tmpl[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)
    return AttachmentBinding(idx, pts - tmpl[idx])


def deform_attachment(model: LbsBodyModel, binding: AttachmentBinding, params: BodyParams) -> np.ndarray:
    idx = np.asarray(binding.body_vertex_index)
    if idx.size and (idx.min() < 0 or idx.max() >= model.n_vertices):
        raise BodyModelError("binding refers to vertices outside the model")
    host = shaped_template(model, params.beta)[idx] + binding.rest_offset
    mats, trans, _ = _skinning_transforms(model, params.beta, params.theta)
    per_joint = np.einsum("jab,vb->vja", mats, host) + trans[None, :, :]
    return np.einsum("vj,vja->va", model.skinning_weights[idx], per_joint)


def sample_shape(rng: np.random.Generator, n_shapes: int, sigma: float = 1.0) -> np.ndarray:
    if sigma < 0:
        raise BodyModelError("sigma must be non-negative")
    return np.clip(rng.normal(0.0, sigma, size=n_shapes), -3 * sigma, 3 * sigma)


def layout_for(n_joints: int):
    """Subset of the full layout with ``n_joints`` joints, as (names, parents, positions)."""
    if not 4 <= n_joints <= len(JOINT_LAYOUT):
        raise BodyModelError(f"n_joints must be in [4, {len(JOINT_LAYOUT)}]")
    drop = set(_REMOVAL_ORDER[: len(JOINT_LAYOUT) - n_joints])
    kept = [row for row in JOINT_LAYOUT if row[0] not in drop]
    index = {row[0]: i for i, row in enumerate(kept)}
    names = [r[0] for r in kept]
    parents = [None if r[1] is None else index[r[1]] for r in kept]
    positions = np.array([r[2] for r in kept], dtype=float)
    return names, parents, positions


def _shape_fields(n_shapes: int, seed: int):
    """Stature, arm span, then smooth random deformations, as functions of position."""
    rng = np.random.default_rng(seed)
    fields = [lambda p: p * np.array([0.0, 0.0, 1.0]), lambda p: p * np.array([1.0, 0.0, 0.0])]
    for _ in range(2, n_shapes):
        freqs = rng.normal(0.0, 3.0, size=(3, 3))
        phases = rng.uniform(0.0, 2 * np.pi, size=3)
        fields.append(lambda p, f=freqs, ph=phases: np.sin(p @ f.T + ph))
    return fields[:n_shapes]


def make_minibody(
    n_joints: int = 24,
    n_vertices: int = 600,
    n_shapes: int = 10,
    seed: int = 0,
    proportions: float = 1.0,
    shape_seed: int = 1234,
) -> LbsBodyModel:
    """Procedural body: vertex rings around joints and cylinders around bones.

    Each joint's regressor row averages an antipodal vertex ring centred on
    that joint, so regressed T-pose joints land on the layout exactly.
    """
    if not 50 <= n_vertices <= 2000:
        raise BodyModelError("n_vertices must be in [50, 2000]")
    if not 2 <= n_shapes <= 10:
        raise BodyModelError("n_shapes must be in [2, 10]")
    rng = np.random.default_rng(seed)
    names, parents, joints = layout_for(n_joints)
    joints = joints.copy()
    joints[:, 2] *= proportions
    n_j = len(names)

    ring = max(m for m in (2, 4, 6) if m * n_j <= n_vertices)
    verts, axis_pts, weights = [], [], []

    def frame(direction):
        d = direction / np.linalg.norm(direction)
        helper = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(d, helper)
        u /= np.linalg.norm(u)
        return u, np.cross(d, u)

    def radius(name):
        return _RING_RADIUS.get(name, 0.05 if ("wrist" in name or "hand" in name or "ankle" in name or "foot" in name) else 0.07)

    for j in range(n_j):
        p = parents[j]
        direction = np.array([0.0, 0.0, 1.0]) if p is None else joints[j] - joints[p]
        u, w = frame(direction)
        r = radius(names[j])
        phase = rng.uniform(0.0, np.pi)
        wrow = np.zeros(n_j)
        if p is None:
            wrow[j] = 1.0
        else:
            wrow[p] = 0.5
            wrow[j] = 0.5
        for k in range(ring // 2):
            a = phase + np.pi * k / (ring // 2)
            off = r * (np.cos(a) * u + np.sin(a) * w)
            for sgn in (1.0, -1.0):
                verts.append(joints[j] + sgn * off)
                axis_pts.append(joints[j])
                weights.append(wrow)

    bones = [(parents[c], c) for c in range(n_j) if parents[c] is not None]
    lengths = np.array([np.linalg.norm(joints[c] - joints[p]) for p, c in bones])
    for _ in range(n_vertices - ring * n_j):
        p, c = bones[rng.choice(len(bones), p=lengths / lengths.sum())]
        s = rng.uniform(0.05, 0.95)
        axis = joints[p] + s * (joints[c] - joints[p])
        u, w = frame(joints[c] - joints[p])
        a = rng.uniform(0.0, 2 * np.pi)
        r = 0.5 * (radius(names[p]) + radius(names[c]))
        verts.append(axis + r * (np.cos(a) * u + np.sin(a) * w))
        axis_pts.append(axis)
        wrow = np.zeros(n_j)
        wrow[p] = 1.0
        wrow[c] = 0.5 * float(np.clip((s - 0.6) / 0.4, 0.0, 1.0))
        if parents[p] is not None:
            wrow[parents[p]] = 0.5 * float(np.clip((0.4 - s) / 0.4, 0.0, 1.0))
        weights.append(wrow / wrow.sum())

    verts = np.array(verts)
    axis_pts = np.array(axis_pts)
    weights = np.array(weights)
    # leaf joints without children still own their ring; keep rows exact on the simplex
    weights /= weights.sum(axis=1, keepdims=True)

    regressor = np.zeros((n_j, len(verts)))
    for j in range(n_j):
        regressor[j, j * ring : (j + 1) * ring] = 1.0 / ring

    # Shape fields act on each vertex's skeletal anchor, so the regressed joints
    # move by the field evaluated at the joint. Fields and their normalisation
    # come from a shared stream and the canonical layout, giving every variant
    # the same shape semantics; on the canonical layout the joint responses are
    # orthonormal, so every shape direction moves the skeleton equally.
    fields = _shape_fields(n_shapes, shape_seed)
    canon = np.array([row[2] for row in JOINT_LAYOUT], dtype=float)
    effects = np.stack([f(canon) for f in fields], axis=-1).reshape(-1, n_shapes)
    _, r = np.linalg.qr(effects)
    mix = np.linalg.inv(r) * SHAPE_JOINT_SCALE
    cand = np.stack([f(axis_pts) for f in fields])
    shapes = np.einsum("kvc,km->mvc", cand, mix)
    # girth: radial swelling; antipodal rings keep it invisible to the regressor
    shapes[1 % n_shapes] += 0.3 * (verts - axis_pts)

    skel = Skeleton.from_joint_positions(names, parents, regressor @ verts, pelvis_index=0)
    return LbsBodyModel(verts, shapes, regressor, weights, skel)


def builtin_variant(name: str, n_shapes: int = 10, n_vertices: int | None = None) -> LbsBodyModel:
    """``"full"``: 24 joints (annotation source); ``"reduced"``: 21 joints, a distinct mesh."""
    if name == "full":
        return make_minibody(24, n_vertices or 600, n_shapes, seed=11)
    if name == "reduced":
        return make_minibody(21, n_vertices or 480, n_shapes, seed=23, proportions=1.01)
    raise BodyModelError(f"unknown built-in body variant {name!r}")
