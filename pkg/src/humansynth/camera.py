"""Pinhole cameras, capsule proxies, ray casting and camera placement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kinematics import Rotation, Transform
from .placement import Footprint, SceneLayout

RAY_EPS = 1e-9
DEFAULT_CAPSULE_RADIUS = 0.08


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fov_alpha: float  # horizontal field of view, radians
    image_width: int
    image_height: int
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if not 0 < self.fov_alpha < math.pi:
            raise CameraError("field of view must lie in (0, pi)")
        if self.image_width <= 0 or self.image_height <= 0:
            raise CameraError("image dimensions must be positive")
        if self.cx is None:
            object.__setattr__(self, "cx", self.image_width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.image_height / 2.0)

    @property
    def focal(self) -> float:
        return (self.image_width / 2.0) / math.tan(self.fov_alpha / 2.0)

    def to_dict(self) -> dict:
        return {
            "fov_alpha": self.fov_alpha,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "cx": self.cx,
            "cy": self.cy,
            "focal": self.focal,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fov_alpha"]), int(d["image_width"]), int(d["image_height"]), d.get("cx"), d.get("cy"))


@dataclass(frozen=True, eq=False)
class CameraRig:
    """Camera-to-world pose; the camera looks along its local -z with +y up."""

    intrinsics: CameraIntrinsics
    pose: Transform

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    @property
    def look_direction(self) -> np.ndarray:
        return -self.pose.rotation.as_matrix()[:, 2]

    @property
    def pitch(self) -> float:
        return math.asin(max(-1.0, min(1.0, float(self.look_direction[2]))))

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "camera_to_world": [float(c) for c in self.pose.as_matrix().ravel()],
            "rotation_wxyz": list(self.pose.rotation.as_tuple()),
            "translation": [float(c) for c in self.pose.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(
            CameraIntrinsics.from_dict(d["intrinsics"]),
            Transform(Rotation.from_sequence(d["rotation_wxyz"]), d["translation"]),
        )


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Rotation:
    """Camera-to-world rotation aiming local -z from ``position`` at ``target``."""
    f = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    f /= np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        raise CameraError("look direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, f)
    return Rotation.from_matrix(np.stack([right, cam_up, -f], axis=1))


@dataclass(frozen=True)
class CameraConstraints:
    lam: float = 1.1
    l_max: float = 10.0
    pitch_min: float = math.radians(-30.0)
    pitch_max: float = math.radians(10.0)
    max_occlusion: float = 0.7
    n_rays: int = 256
    attempts_per_camera: int = 10_000
    ground_clearance: float = 0.1

    def __post_init__(self):
        if not self.lam > 0 or not self.l_max > 0:
            raise CameraError("lambda and L_max must be positive")
        if self.pitch_min > self.pitch_max:
            raise CameraError("pitch_min must not exceed pitch_max")
        if not 0 <= self.max_occlusion <= 1:
            raise CameraError("max_occlusion must lie in [0, 1]")
        if self.n_rays < 1:
            raise CameraError("n_rays must be >= 1")

    @classmethod
    def from_dict(cls, d: dict | None) -> "CameraConstraints":
        d = dict(d or {})
        # config files carry degrees
        for k in ("pitch_min", "pitch_max"):
            if k + "_deg" in d:
                d[k] = math.radians(d.pop(k + "_deg"))
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class CapsuleProxy:
    """One capsule per bone: segments ``a[i] -> b[i]`` with a shared radius."""

    a: np.ndarray  # (N, 3)
    b: np.ndarray  # (N, 3)
    radius: float = DEFAULT_CAPSULE_RADIUS

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(-1, 3))
        if self.a.shape != self.b.shape:
            raise CameraError("capsule endpoint arrays differ in shape")
        if not self.radius > 0:
            raise CameraError("capsule radius must be positive")

    def __len__(self):
        return len(self.a)

    @classmethod
    def from_joints(cls, joints, parents, radius: float = DEFAULT_CAPSULE_RADIUS) -> "CapsuleProxy":
        joints = np.asarray(joints, dtype=float)
        pairs = [(p, c) for c, p in enumerate(parents) if p is not None]
        if not pairs:
            return cls(joints[:1], joints[:1], radius)
        return cls(joints[[p for p, _ in pairs]], joints[[c for _, c in pairs]], radius)

    def surface_area(self) -> np.ndarray:
        h = np.linalg.norm(self.b - self.a, axis=1)
        r = self.radius
        return 2 * math.pi * r * h + 4 * math.pi * r * r

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate([self.a, self.b])
        return pts.min(axis=0) - self.radius, pts.max(axis=0) + self.radius


@dataclass(frozen=True, eq=False)
class Box3:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    @classmethod
    def from_footprint(cls, fp: Footprint, z0: float, height: float | None = None) -> "Box3":
        h = fp.h if height is None else height
        return cls((fp.xmin, fp.ymin, z0), (fp.xmax, fp.ymax, z0 + h))


def object_volumes(scene: SceneLayout) -> list[Box3]:
    out = []
    for o in scene.objects:
        z0 = scene.heightfield.height(o.x, o.y)
        out.append(Box3.from_footprint(o, z0))
    return out


# -- ray kernels ---------------------------------------------------------------


def _dot(u, v):
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]


def ray_capsule_hits(origins, dirs, a, b, radius) -> np.ndarray:
    """Nearest ``t > 1e-9`` per (ray, capsule) pair, ``inf`` on miss.

    ``origins``/``dirs`` broadcast against ``a``/``b``; ``dirs`` must be unit
    length. Candidates are the cylinder wall between the caps plus each
    endpoint sphere on its outward side, which together trace the capsule
    boundary (entry and exit).
    """
    o = np.asarray(origins, dtype=float)
    d = np.asarray(dirs, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r = radius
    ba = b - a
    oa = o - a
    baba = _dot(ba, ba)
    bard = _dot(ba, d)
    baoa = _dot(ba, oa)
    rdoa = _dot(d, oa)
    oaoa = _dot(oa, oa)
    shape = np.broadcast(oaoa, baba).shape
    best = np.full(shape, np.inf)

    with np.errstate(invalid="ignore", divide="ignore"):
        # cylinder wall
        qa = baba - bard * bard
        qb = baba * rdoa - baoa * bard
        qc = baba * oaoa - baoa * baoa - r * r * baba
        disc = qb * qb - qa * qc
        cyl_ok = (qa > 1e-18 * np.maximum(baba, 1e-300)) & (disc >= 0)
        sq = np.sqrt(np.where(cyl_ok, disc, 0.0))
        for sgn in (-1.0, 1.0):
            t = (-qb + sgn * sq) / np.where(cyl_ok, qa, 1.0)
            y = baoa + t * bard
            ok = cyl_ok & (t > RAY_EPS) & (y >= 0) & (y <= baba)
            best = np.where(ok & (t < best), t, best)

        # end spheres
        for center_is_a in (True, False):
            oc = oa if center_is_a else o - b
            hb = _dot(d, oc)
            hc = _dot(oc, oc) - r * r
            dd = hb * hb - hc
            s_ok = dd >= 0
            sq = np.sqrt(np.where(s_ok, dd, 0.0))
            for sgn in (-1.0, 1.0):
                t = -hb + sgn * sq
                y = baoa + t * bard  # projection of the hit onto the axis, scaled by |ba|
                side = (y <= 0) if center_is_a else (y >= baba)
                ok = s_ok & (t > RAY_EPS) & side
                best = np.where(ok & (t < best), t, best)
    return best


def ray_capsule_intersect(origin, direction, a, b, radius: float) -> float | None:
    """Distance along the normalized ray to the first capsule crossing, or None."""
    d = np.asarray(direction, dtype=float)
    n = np.linalg.norm(d)
    if n == 0:
        raise CameraError("ray direction must be non-zero")
    t = float(ray_capsule_hits(np.asarray(origin, dtype=float)[None], (d / n)[None], np.asarray(a, dtype=float)[None], np.asarray(b, dtype=float)[None], radius)[0])
    return None if math.isinf(t) else t


def ray_box_hits(origins, dirs, lo, hi) -> np.ndarray:
    """Slab test; nearest ``t > 1e-9`` per (ray, box), ``inf`` on miss."""
    o = np.asarray(origins, dtype=float)
    d = np.asarray(dirs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = tmax >= np.maximum(tmin, RAY_EPS)
    t = np.where(tmin > RAY_EPS, tmin, tmax)
    return np.where(hit, t, np.inf)


def cast_capsules(origins, dirs, a, b, radius) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit over many capsules for many rays: returns (t, capsule index or -1).

    Pairs are culled with each capsule's bounding sphere before the exact test.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n_rays = len(dirs)
    best_t = np.full(n_rays, np.inf)
    best_i = np.full(n_rays, -1, dtype=int)
    if len(a) == 0 or n_rays == 0:
        return best_t, best_i
    centers = 0.5 * (a + b)
    bound = 0.5 * np.linalg.norm(b - a, axis=1) + radius
    if len(origins) == 1:
        rel = centers - origins[0]
        along = dirs @ rel.T
        perp2 = np.sum(rel * rel, axis=1)[None, :] - along * along
    else:
        rel = centers[None, :, :] - origins[:, None, :]
        along = np.einsum("rcx,rx->rc", rel, dirs)
        perp2 = np.einsum("rcx,rcx->rc", rel, rel) - along * along
    cand = (perp2 <= (bound * bound)[None, :] * (1 + 1e-9) + 1e-12) & (along + bound[None, :] > 0)
    ri, ci = np.nonzero(cand)
    if ri.size == 0:
        return best_t, best_i
    o = origins[0][None, :] if len(origins) == 1 else origins[ri]
    t = ray_capsule_hits(o, dirs[ri], a[ci], b[ci], radius)
    dense = np.full(cand.shape, np.inf)
    dense[ri, ci] = t
    # argmin returns the lowest capsule index among equal distances
    best_i = np.argmin(dense, axis=1)
    best_t = dense[np.arange(n_rays), best_i]
    best_i[~np.isfinite(best_t)] = -1
    return best_t, best_i


def cast_boxes(origins, dirs, boxes: list[Box3]) -> np.ndarray:
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    best = np.full(len(dirs), np.inf)
    for box in boxes:
        best = np.minimum(best, ray_box_hits(origins, dirs, box.lo, box.hi))
    return best


# -- formulas and estimators --------------------------------------------------------


def distance_bounds(subject_positions, alpha: float, lam: float, l_max: float) -> tuple[float, float]:
    """``L_min = lam / sin(alpha/2) * max_i ||p_i - mean(p)||``; returns ``(L_min, L_max)``."""
    p = np.asarray(subject_positions, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise CameraError("need at least one subject")
    if not 0 < alpha < math.pi:
        raise CameraError("alpha must lie in (0, pi)")
    spread = float(np.max(np.linalg.norm(p - p.mean(axis=0), axis=1)))
    return lam / math.sin(alpha / 2.0) * spread, l_max


def sample_capsule_surface(target: CapsuleProxy, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points uniform by area over the union of capsule surfaces (overlaps counted twice).

    A capsule's area is spread evenly along its axis, caps included, so one
    variate picks the capsule and the axial coordinate through the cumulative
    area. That variate is jittered-stratified (one draw per ``1/n`` stratum):
    each point is still uniform by area, with lower variance than i.i.d. draws.
    """
    areas = target.surface_area()
    total = float(areas.sum())
    if not total > 0:
        raise CameraError("target has zero surface area")
    r = target.radius
    u = (np.arange(n) + rng.uniform(size=n)) / n * total
    cum = np.cumsum(areas)
    idx = np.minimum(np.searchsorted(cum, u, side="right"), len(areas) - 1)
    a, b = target.a[idx], target.b[idx]
    axis = b - a
    h = np.linalg.norm(axis, axis=1)
    s_ax = np.clip((u - (cum[idx] - areas[idx])) / (2 * math.pi * r), 0.0, h + 2 * r) - r
    phi = rng.uniform(0.0, 2 * math.pi, size=n)

    d = np.where(h[:, None] > 0, axis / np.where(h > 0, h, 1.0)[:, None], np.array([0.0, 0.0, 1.0]))
    helper = np.where(np.abs(d[:, 1:2]) < 0.9, np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(d, e1)
    along = np.clip(s_ax, 0.0, h)
    dz = s_ax - along  # nonzero only on the caps
    rho = np.sqrt(np.maximum(r * r - dz * dz, 0.0))
    return a + (along + dz)[:, None] * d + rho[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)


def occlusion_ratio(
    camera_position,
    target: CapsuleProxy,
    blockers: list[CapsuleProxy] | None = None,
    boxes: list[Box3] | None = None,
    n_rays: int = 256,
    rng: np.random.Generator | None = None,
) -> float:
    """Fraction of camera-to-target rays stopped by other geometry first.

    Sample points are drawn on the target surface; each ray's target distance
    is its nearest hit on the target itself, so self-occlusion never counts.
    """
    if n_rays < 1:
        raise CameraError("n_rays must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    cam = np.asarray(camera_position, dtype=float)
    pts = sample_capsule_surface(target, n_rays, rng)
    dirs = pts - cam
    dist = np.linalg.norm(dirs, axis=1)
    dirs /= dist[:, None]
    t_target, _ = cast_capsules(cam[None], dirs, target.a, target.b, target.radius)
    t_target = np.minimum(t_target, dist)
    t_block = np.full(n_rays, np.inf)
    for bl in blockers or []:
        t_block = np.minimum(t_block, cast_capsules(cam[None], dirs, bl.a, bl.b, bl.radius)[0])
    if boxes:
        t_block = np.minimum(t_block, cast_boxes(cam[None], dirs, boxes))
    return float(np.count_nonzero(t_block < t_target)) / n_rays


# -- placement -----------------------------------------------------------------


@dataclass
class CameraPlacementResult:
    cameras: list[CameraRig]
    attempts: int
    rejections: dict = field(default_factory=dict)
    center: np.ndarray | None = None
    l_min: float = 0.0
    l_max: float = 0.0
    occlusion: list[list[float]] = field(default_factory=list)

    @property
    def exhausted(self) -> bool:
        return bool(self.rejections.get("exhausted", False))

    def diagnostic(self) -> dict:
        return {
            "attempts": self.attempts,
            "rejections": {k: v for k, v in self.rejections.items() if k != "exhausted"},
            "exhausted": self.exhausted,
            "l_min": self.l_min,
            "l_max": self.l_max,
        }


def actor_envelope(frames: list[CapsuleProxy]) -> Box3:
    los, his = zip(*(f.bounds() for f in frames))
    return Box3(np.min(los, axis=0), np.max(his, axis=0))


def subject_occlusions(
    position, actors: list[list[CapsuleProxy]], boxes: list[Box3], n_rays: int, rng: np.random.Generator
) -> list[float]:
    """Mean occlusion ratio per subject over the supplied frames."""
    n_frames = len(actors[0])
    out = []
    for i, frames in enumerate(actors):
        total = 0.0
        for f in range(n_frames):
            blockers = [actors[k][f] for k in range(len(actors)) if k != i]
            total += occlusion_ratio(position, frames[f], blockers, boxes, n_rays, rng)
        out.append(total / n_frames)
    return out


def check_camera(
    rig: CameraRig,
    scene: SceneLayout,
    actors: list[list[CapsuleProxy]],
    center,
    l_min: float,
    l_max: float,
    constraints: CameraConstraints,
) -> str | None:
    """Geometric conditions for a candidate camera; returns the failing condition or None."""
    pos = rig.position
    for box in object_volumes(scene) + [actor_envelope(a) for a in actors]:
        if box.contains(pos):
            return "penetration"
    xmin, ymin, xmax, ymax = scene.bounds
    gx = min(max(pos[0], xmin), xmax)
    gy = min(max(pos[1], ymin), ymax)
    if pos[2] < scene.heightfield.height(gx, gy) + constraints.ground_clearance:
        return "below_ground"
    dist = float(np.linalg.norm(pos - center))
    if not (l_min - 1e-9 <= dist <= l_max + 1e-9):
        return "distance"
    if not (constraints.pitch_min - 1e-9 <= rig.pitch <= constraints.pitch_max + 1e-9):
        return "pitch"
    aim = (np.asarray(center) - pos) / dist
    if float(np.dot(aim, rig.look_direction)) < 1 - 1e-9:
        return "aim"
    return None


def place_cameras(
    scene: SceneLayout,
    actors: list[list[CapsuleProxy]],
    n_cameras: int,
    constraints: CameraConstraints,
    intrinsics: CameraIntrinsics,
    rng: np.random.Generator,
    subject_positions=None,
) -> CameraPlacementResult:
    """Rejection-sample cameras on the spherical shell around the subjects' mean.

    ``actors[i]`` holds subject i's capsule proxies at the sampled frames.
    ``subject_positions`` defaults to each subject's mean first-capsule start
    (the root joint) over those frames.
    """
    if n_cameras < 1:
        raise CameraError("n_cameras must be >= 1")
    if not actors:
        raise CameraError("need at least one subject")
    if subject_positions is None:
        subject_positions = [np.mean([f.a[0] for f in frames], axis=0) for frames in actors]
    p = np.asarray(subject_positions, dtype=float)
    center = p.mean(axis=0)
    l_min, l_max = distance_bounds(p, intrinsics.fov_alpha, constraints.lam, constraints.l_max)
    boxes = object_volumes(scene)
    result = CameraPlacementResult([], 0, {}, center, l_min, l_max)
    if l_min > l_max:
        result.rejections["exhausted"] = True
        result.rejections["distance_bounds"] = 1
        return result

    # pitch of the look direction is -elevation of the camera seen from the center
    z_lo = -math.sin(constraints.pitch_max)
    z_hi = -math.sin(constraints.pitch_min)
    for _ in range(n_cameras):
        accepted = False
        for _ in range(constraints.attempts_per_camera):
            result.attempts += 1
            radius = (l_min**3 + rng.uniform() * (l_max**3 - l_min**3)) ** (1.0 / 3.0)
            uz = rng.uniform(z_lo, z_hi)
            az = rng.uniform(0.0, 2 * math.pi)
            ring = math.sqrt(max(0.0, 1 - uz * uz))
            pos = center + radius * np.array([ring * math.cos(az), ring * math.sin(az), uz])
            if radius < 1e-6:
                result.rejections["distance"] = result.rejections.get("distance", 0) + 1
                continue
            rig = CameraRig(intrinsics, Transform(look_at(pos, center), pos))
            why = check_camera(rig, scene, actors, center, l_min, l_max, constraints)
            if why is None:
                occ = subject_occlusions(pos, actors, boxes, constraints.n_rays, rng)
                if max(occ) > constraints.max_occlusion:
                    why = "occlusion"
            if why is not None:
                result.rejections[why] = result.rejections.get(why, 0) + 1
                continue
            result.cameras.append(rig)
            result.occlusion.append(occ)
            accepted = True
            break
        if not accepted:
            result.rejections["exhausted"] = True
            break
    return result
