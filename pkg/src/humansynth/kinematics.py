"""Rotation algebra and forward kinematics over bone hierarchies.

Conventions
-----------
- Quaternions are stored as (w, x, y, z) and act on column vectors.
- Right-handed world, +z up, ground plane is x-y.
- Angles are radians.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPS = 1e-9


class KinematicsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion. Renormalized on construction."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
        if not math.isfinite(n) or n == 0.0:
            raise KinematicsError(f"cannot normalize quaternion {self.as_tuple()}")
        object.__setattr__(self, "w", float(self.w) / n)
        object.__setattr__(self, "x", float(self.x) / n)
        object.__setattr__(self, "y", float(self.y) / n)
        object.__setattr__(self, "z", float(self.z) / n)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> "Rotation":
        ax = np.asarray(axis, dtype=float)
        n = np.linalg.norm(ax)
        if n == 0.0:
            return cls.identity()
        ax = ax / n
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), ax[0] * s, ax[1] * s, ax[2] * s)

    @classmethod
    def from_rotvec(cls, v: Sequence[float]) -> "Rotation":
        v = np.asarray(v, dtype=float)
        angle = float(np.linalg.norm(v))
        if angle < 1e-12:
            # first-order expansion keeps tiny increments exact enough for Jacobians
            return cls(1.0, v[0] / 2.0, v[1] / 2.0, v[2] / 2.0)
        return cls.from_axis_angle(v / angle, angle)

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            return cls(0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        if m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            return cls((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        if m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            return cls((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        return cls((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)

    @classmethod
    def from_sequence(cls, q: Sequence[float]) -> "Rotation":
        return cls(*(float(c) for c in q))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w, self.x, self.y, self.z)

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def as_rotvec(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        if w < 0:
            w, x, y, z = -w, -x, -y, -z
        s = math.sqrt(x * x + y * y + z * z)
        if s < 1e-12:
            return np.array([2 * x, 2 * y, 2 * z])
        angle = 2.0 * math.atan2(s, w)
        return np.array([x, y, z]) * (angle / s)

    def angle(self) -> float:
        return float(np.linalg.norm(self.as_rotvec()))

    def inverse(self) -> "Rotation":
        return Rotation(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Rotation") -> "Rotation":
        return compose_rotations(self, other)

    def apply(self, v) -> np.ndarray:
        return self.as_matrix() @ np.asarray(v, dtype=float)

    def is_close(self, other: "Rotation", tol: float = EPS) -> bool:
        a, b = self.as_tuple(), other.as_tuple()
        d_pos = max(abs(p - q) for p, q in zip(a, b))
        d_neg = max(abs(p + q) for p, q in zip(a, b))
        return min(d_pos, d_neg) <= tol

    def __eq__(self, other):
        if not isinstance(other, Rotation):
            return NotImplemented
        return self.is_close(other)

    __hash__ = None  # tolerance equality cannot be hashed consistently


def compose_rotations(a: Rotation, b: Rotation) -> Rotation:
    """Hamilton product ``a * b``: rotate by ``b`` first, then by ``a``."""
    aw, ax, ay, az = a.w, a.x, a.y, a.z
    bw, bx, by, bz = b.w, b.x, b.y, b.z
    return Rotation(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def _vec3(v) -> np.ndarray:
    arr = np.array(v, dtype=float).reshape(3)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Transform:
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: _vec3((0.0, 0.0, 0.0)))

    def __post_init__(self):
        object.__setattr__(self, "translation", _vec3(self.translation))

    @classmethod
    def identity(cls) -> "Transform":
        return cls()

    def apply(self, p) -> np.ndarray:
        return self.rotation.apply(p) + self.translation

    def compose(self, other: "Transform") -> "Transform":
        """``self ∘ other``: apply ``other`` first."""
        return Transform(self.rotation * other.rotation, self.rotation.apply(other.translation) + self.translation)

    def __matmul__(self, other: "Transform") -> "Transform":
        return self.compose(other)

    def inverse(self) -> "Transform":
        inv = self.rotation.inverse()
        return Transform(inv, -inv.apply(self.translation))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def is_close(self, other: "Transform", tol: float = EPS) -> bool:
        return self.rotation.is_close(other.rotation, tol) and bool(
            np.max(np.abs(self.translation - other.translation)) <= tol
        )


@dataclass(frozen=True)
class Bone:
    name: str
    parent: int | None
    rest_offset: tuple[float, float, float]


class Skeleton:
    """Bone hierarchy in topological order (parent index < child index).

    ``grounded=False`` drops the positive-pelvis-height requirement for
    abstract chains that never stand on a ground plane.
    """

    def __init__(self, bones: Iterable[Bone], pelvis_index: int = 0, grounded: bool = True):
        bones = tuple(
            b if isinstance(b, Bone) else Bone(b[0], b[1], tuple(float(c) for c in b[2])) for b in bones
        )
        if not bones:
            raise KinematicsError("skeleton needs at least one bone")
        roots = [i for i, b in enumerate(bones) if b.parent is None]
        if len(roots) != 1:
            raise KinematicsError(f"expected exactly one root, found {len(roots)}")
        for i, b in enumerate(bones):
            if b.parent is not None and not (0 <= b.parent < i):
                raise KinematicsError(f"bone {i} ({b.name}) has parent {b.parent}; parents must precede children")
        names = [b.name for b in bones]
        if len(set(names)) != len(names):
            raise KinematicsError("bone names must be unique")
        if not 0 <= pelvis_index < len(bones):
            raise KinematicsError(f"pelvis index {pelvis_index} out of range")
        self.bones = bones
        self.pelvis_index = int(pelvis_index)
        self.root_index = roots[0]
        self.parents = tuple(b.parent for b in bones)
        self.offsets = np.array([b.rest_offset for b in bones], dtype=float).reshape(len(bones), 3)
        self.offsets.setflags(write=False)
        self._index = {n: i for i, n in enumerate(names)}
        self.grounded = bool(grounded)
        if grounded and self.pelvis_height() <= 0:
            raise KinematicsError("pelvis must sit above the ground plane in T-pose")

    def __len__(self):
        return len(self.bones)

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.bones]

    def index(self, name: str) -> int:
        return self._index[name]

    def children(self, i: int) -> list[int]:
        return [j for j, p in enumerate(self.parents) if p == i]

    def rest_joint_positions(self) -> np.ndarray:
        out = np.zeros((len(self.bones), 3))
        for i, p in enumerate(self.parents):
            out[i] = self.offsets[i] if p is None else out[p] + self.offsets[i]
        return out

    def pelvis_height(self) -> float:
        return float(self.rest_joint_positions()[self.pelvis_index, 2])

    def descendants_mask(self) -> np.ndarray:
        """``mask[i, d]`` is True when ``d`` is a strict descendant of ``i``."""
        n = len(self.bones)
        mask = np.zeros((n, n), dtype=bool)
        for d in range(n):
            p = self.parents[d]
            while p is not None:
                mask[p, d] = True
                p = self.parents[p]
        return mask

    def with_offsets(self, offsets) -> "Skeleton":
        offsets = np.asarray(offsets, dtype=float)
        bones = [Bone(b.name, b.parent, tuple(offsets[i])) for i, b in enumerate(self.bones)]
        return Skeleton(bones, self.pelvis_index, self.grounded)

    @classmethod
    def from_joint_positions(cls, names, parents, joints, pelvis_index=0) -> "Skeleton":
        joints = np.asarray(joints, dtype=float)
        bones = []
        for i, (n, p) in enumerate(zip(names, parents)):
            off = joints[i] if p is None else joints[i] - joints[p]
            bones.append(Bone(n, p, tuple(off)))
        return cls(bones, pelvis_index)

    def to_dict(self) -> dict:
        return {
            "bones": [{"name": b.name, "parent": b.parent, "rest_offset": list(b.rest_offset)} for b in self.bones],
            "pelvis_index": self.pelvis_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        bones = [Bone(b["name"], b["parent"], tuple(float(c) for c in b["rest_offset"])) for b in d["bones"]]
        return cls(bones, int(d["pelvis_index"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Skeleton":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class PoseFrame:
    root_translation: np.ndarray
    local_rotations: tuple[Rotation, ...]

    def __post_init__(self):
        object.__setattr__(self, "root_translation", _vec3(self.root_translation))
        object.__setattr__(self, "local_rotations", tuple(self.local_rotations))

    @classmethod
    def tpose(cls, n_bones: int, root_translation=(0.0, 0.0, 0.0)) -> "PoseFrame":
        return cls(root_translation, (Rotation.identity(),) * n_bones)

    def __len__(self):
        return len(self.local_rotations)

    def is_tpose(self, tol: float = EPS) -> bool:
        ident = Rotation.identity()
        return all(r.is_close(ident, tol) for r in self.local_rotations)

    def to_dict(self) -> dict:
        return {
            "root_translation": [float(c) for c in self.root_translation],
            "local_rotations": [list(r.as_tuple()) for r in self.local_rotations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoseFrame":
        return cls(d["root_translation"], tuple(Rotation.from_sequence(q) for q in d["local_rotations"]))


def _check(skeleton: Skeleton, pose: PoseFrame) -> None:
    if len(pose.local_rotations) != len(skeleton.bones):
        raise KinematicsError(
            f"pose has {len(pose.local_rotations)} rotations but skeleton has {len(skeleton.bones)} bones"
        )


def fk_global_rotations(skeleton: Skeleton, pose: PoseFrame) -> list[Rotation]:
    """Model-space rotation of every bone: ``global[i] = global[parent(i)] * local[i]``."""
    _check(skeleton, pose)
    out: list[Rotation] = []
    for i, p in enumerate(skeleton.parents):
        local = pose.local_rotations[i]
        out.append(local if p is None else out[p] * local)
    return out


def fk_joint_positions(skeleton: Skeleton, pose: PoseFrame) -> np.ndarray:
    """Posed joint positions, shape ``(J, 3)``.

    A bone's rotation moves its children; the root joint sits at the root
    translation plus its rest offset.
    """
    globals_ = fk_global_rotations(skeleton, pose)
    return _positions_from_globals(skeleton, pose.root_translation, [g.as_matrix() for g in globals_])


def _positions_from_globals(skeleton: Skeleton, root_translation, mats) -> np.ndarray:
    out = np.zeros((len(skeleton.bones), 3))
    offs = skeleton.offsets
    for i, p in enumerate(skeleton.parents):
        if p is None:
            out[i] = root_translation + offs[i]
        else:
            out[i] = out[p] + mats[p] @ offs[i]
    return out


def local_from_global(skeleton: Skeleton, globals_: Sequence[Rotation]) -> list[Rotation]:
    """Invert the FK recursion: ``local[i] = global[parent]^-1 * global[i]``."""
    out = []
    for i, p in enumerate(skeleton.parents):
        out.append(globals_[i] if p is None else globals_[p].inverse() * globals_[i])
    return out


def apply_transform_to_pose(pose: PoseFrame, transform: Transform, root_offset=(0.0, 0.0, 0.0)) -> PoseFrame:
    """Rigidly move a pose by rotating its root and re-placing the root translation.

    ``root_offset`` is the root bone's rest offset; passing it keeps the
    result consistent with transforming FK joint positions directly.
    """
    o = np.asarray(root_offset, dtype=float)
    rots = list(pose.local_rotations)
    rots[0] = transform.rotation * rots[0]
    trans = transform.rotation.apply(pose.root_translation + o) + transform.translation - o
    return PoseFrame(trans, rots)
