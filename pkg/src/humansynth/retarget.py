"""Motion transfer between structurally similar skeletons."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kinematics import (
    KinematicsError,
    PoseFrame,
    Rotation,
    Skeleton,
    Transform,
    apply_transform_to_pose,
    fk_global_rotations,
    local_from_global,
)


class RetargetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MotionClip:
    fps: float
    frames: tuple[PoseFrame, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not self.fps > 0:
            raise RetargetError("fps must be positive")
        if not frames:
            raise RetargetError("clip has no frames")
        n = len(frames[0])
        if any(len(f) != n for f in frames):
            raise RetargetError("all frames must have the same bone count")
        if not frames[0].is_tpose():
            raise RetargetError("frame 0 must be the T-pose")

    @property
    def tpose_frame(self) -> PoseFrame:
        return self.frames[0]

    @property
    def n_bones(self) -> int:
        return len(self.frames[0])

    def __len__(self):
        return len(self.frames)

    @property
    def duration(self) -> float:
        return (len(self.frames) - 1) / self.fps

    def to_dict(self) -> dict:
        return {"fps": self.fps, "frames": [f.to_dict() for f in self.frames]}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionClip":
        return cls(float(d["fps"]), tuple(PoseFrame.from_dict(f) for f in d["frames"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MotionClip":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class BoneMap:
    pairs: tuple[tuple[int, int], ...]

    def validate(self, src: Skeleton, tgt: Skeleton) -> None:
        srcs = [s for s, _ in self.pairs]
        tgts = [t for _, t in self.pairs]
        if len(set(srcs)) != len(srcs) or len(set(tgts)) != len(tgts):
            raise RetargetError("bone map must be injective on both sides")
        for s, t in self.pairs:
            if not (0 <= s < len(src) and 0 <= t < len(tgt)):
                raise RetargetError(f"bone pair ({s}, {t}) out of range")
        d = dict(self.pairs)
        if d.get(src.root_index) != tgt.root_index:
            raise RetargetError("bone map must send the source root to the target root")
        if d.get(src.pelvis_index) != tgt.pelvis_index:
            raise RetargetError("bone map must send the source pelvis to the target pelvis")

    def target_to_source(self) -> dict[int, int]:
        return {t: s for s, t in self.pairs}


def bone_map_by_name(src: Skeleton, tgt: Skeleton, aliases: dict[str, str] | None = None) -> BoneMap:
    """Pair bones whose names match, optionally through a ``source -> target`` alias table."""
    aliases = aliases or {}
    tgt_index = {n: i for i, n in enumerate(tgt.names)}
    pairs = []
    for i, name in enumerate(src.names):
        j = tgt_index.get(aliases.get(name, name))
        if j is not None:
            pairs.append((i, j))
    bm = BoneMap(tuple(pairs))
    bm.validate(src, tgt)
    return bm


@dataclass(frozen=True, eq=False)
class WorldPose:
    beta: np.ndarray
    theta_w: PoseFrame


def relative_motion(global_t: Rotation, global_tpose: Rotation) -> Rotation:
    """Model-space rotation relative to the T-pose: ``global_t * global_tpose^-1``."""
    return global_t * global_tpose.inverse()


def scale_root_translation(t_src, h_pelvis: float, h_pelvis_src: float) -> np.ndarray:
    if h_pelvis <= 0 or h_pelvis_src <= 0:
        raise RetargetError("pelvis heights must be positive")
    return (h_pelvis / h_pelvis_src) * np.asarray(t_src, dtype=float)


def retarget_clip(
    src: Skeleton,
    clip: MotionClip,
    tgt: Skeleton,
    bone_map: BoneMap,
) -> MotionClip:
    """Drive ``tgt`` so mapped bones reach the same model-space rotation as ``src``.

    For mapped target bone i at frame t the model-space rotation is
    ``G_i(0) * G_src(t) * G_src(0)^-1``. Unmapped target bones keep an identity
    local rotation. Root translation is scaled by the pelvis-height ratio.
    Both clips start from the identity T-pose, so ``G_i(0)`` is the identity.
    """
    if clip.n_bones != len(src):
        raise RetargetError(f"clip has {clip.n_bones} bones, source skeleton has {len(src)}")
    bone_map.validate(src, tgt)
    target_tpose = PoseFrame.tpose(len(tgt))
    tgt_rest = fk_global_rotations(tgt, target_tpose)
    src_rest = fk_global_rotations(src, clip.tpose_frame)
    t2s = bone_map.target_to_source()
    ratio_h, ratio_h_src = tgt.pelvis_height(), src.pelvis_height()

    frames = []
    for t, frame in enumerate(clip.frames):
        if t == 0:
            frames.append(PoseFrame(scale_root_translation(frame.root_translation, ratio_h, ratio_h_src), target_tpose.local_rotations))
            continue
        src_globals = fk_global_rotations(src, frame)
        tgt_globals: list[Rotation] = []
        for i, p in enumerate(tgt.parents):
            s = t2s.get(i)
            if s is not None:
                g = tgt_rest[i] * relative_motion(src_globals[s], src_rest[s])
            elif p is None:
                g = target_tpose.local_rotations[i]
            else:
                g = tgt_globals[p]
            tgt_globals.append(g)
        locals_ = local_from_global(tgt, tgt_globals)
        frames.append(PoseFrame(scale_root_translation(frame.root_translation, ratio_h, ratio_h_src), locals_))
    return MotionClip(clip.fps, tuple(frames))


def to_world_pose(beta, pose: PoseFrame, placement: Transform, root_offset=None) -> WorldPose:
    """Express a model-space pose in the world.

    The root rotation is pre-multiplied by the placement rotation. With
    ``root_offset`` (the root bone's rest offset) the translation is
    corrected so that FK of the result equals the placed FK joints; without
    it the placement is applied to the root translation as-is.
    """
    beta = np.array(beta, dtype=float)
    beta.setflags(write=False)
    offset = (0.0, 0.0, 0.0) if root_offset is None else root_offset
    return WorldPose(beta, apply_transform_to_pose(pose, placement, offset))


def synthetic_clip(
    skeleton: Skeleton,
    rng: np.random.Generator,
    n_frames: int = 301,
    fps: float = 30.0,
    max_swing_deg: float = 25.0,
    max_speed: float = 0.3,
) -> MotionClip:
    """Seeded sinusoidal joint swings with a slow root drift.

    Every swing is ``A * sin(2*pi*f*t)`` so frame 0 is exactly the T-pose.
    """
    if n_frames < 1:
        raise RetargetError("n_frames must be >= 1")
    n = len(skeleton)
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    amps = np.radians(rng.uniform(0.0, max_swing_deg, size=n))
    freqs = rng.uniform(0.3, 1.5, size=n)
    heading = rng.uniform(0.0, 2 * math.pi)
    speed = rng.uniform(0.0, max_speed)
    bob = rng.uniform(0.0, 0.03)
    drift = np.array([math.cos(heading), math.sin(heading), 0.0]) * speed

    frames = []
    for k in range(n_frames):
        t = k / fps
        rots = tuple(
            Rotation.from_axis_angle(axes[i], amps[i] * math.sin(2 * math.pi * freqs[i] * t)) for i in range(n)
        )
        root = drift * t + np.array([0.0, 0.0, bob * math.sin(2 * math.pi * 2.0 * t)])
        if k == 0:
            rots = (Rotation.identity(),) * n
        frames.append(PoseFrame(root, rots))
    return MotionClip(fps, tuple(frames))


def loop_to_length(clip: MotionClip, n_frames: int) -> MotionClip:
    """Truncate or loop a clip to ``n_frames``; looping skips the T-pose frame.

    Looped frames are offset by the accumulated root displacement so the
    trajectory stays continuous.
    """
    if n_frames < 1:
        raise RetargetError("n_frames must be >= 1")
    if n_frames <= len(clip):
        return MotionClip(clip.fps, clip.frames[:n_frames])
    body = clip.frames[1:] or clip.frames
    step = body[-1].root_translation - clip.frames[0].root_translation
    frames = list(clip.frames)
    k = 0
    while len(frames) < n_frames:
        f = body[k % len(body)]
        lap = k // len(body) + 1
        frames.append(PoseFrame(f.root_translation + lap * step, f.local_rotations))
        k += 1
    return MotionClip(clip.fps, tuple(frames))


def clip_global_rotations(skeleton: Skeleton, clip: MotionClip) -> list[list[Rotation]]:
    return [fk_global_rotations(skeleton, f) for f in clip.frames]


__all__ = [
    "BoneMap",
    "KinematicsError",
    "MotionClip",
    "RetargetError",
    "WorldPose",
    "bone_map_by_name",
    "loop_to_length",
    "relative_motion",
    "retarget_clip",
    "scale_root_translation",
    "synthetic_clip",
    "to_world_pose",
]
