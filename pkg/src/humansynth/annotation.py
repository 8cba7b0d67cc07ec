"""Per-frame ground truth: keypoints, boxes, occlusion filtering and proxy maps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Box3, CameraRig, CapsuleProxy, cast_boxes, ray_capsule_hits
from .kinematics import PoseFrame

BEHIND_EPS = 1e-6
PFM_BACKGROUND = 1e30


def round9(x: float) -> float:
    """Round to 9 significant digits (the ndjson float precision)."""
    return float(f"{x:.9g}")


@dataclass(frozen=True, eq=False)
class AnnotationRecord:
    sequence_id: int
    frame_index: int
    actor_id: int
    camera_id: int
    beta: np.ndarray
    theta_w: PoseFrame
    joints_3d: np.ndarray  # (J, 3) world
    keypoints_2d: list  # per joint: (u, v, visible) with u, v None when behind the camera
    bbox: dict | None
    occlusion: float

    def to_dict(self) -> dict:
        kp = [[None if u is None else round9(u), None if v is None else round9(v), int(vis)] for u, v, vis in self.keypoints_2d]
        return {
            "sequence_id": self.sequence_id,
            "frame_index": self.frame_index,
            "actor_id": self.actor_id,
            "camera_id": self.camera_id,
            "beta": [round9(b) for b in self.beta],
            "theta_w": {
                "root_translation": [round9(c) for c in self.theta_w.root_translation],
                "local_rotations": [[round9(c) for c in r.as_tuple()] for r in self.theta_w.local_rotations],
            },
            "joints_3d": [[round9(c) for c in j] for j in self.joints_3d],
            "keypoints_2d": kp,
            "bbox": None if self.bbox is None else {k: round9(v) for k, v in self.bbox.items()},
            "occlusion": round9(self.occlusion),
        }


@dataclass(frozen=True, eq=False)
class ProxyMaps:
    depth: np.ndarray  # (H, W) camera-frame depth of actors, inf on background
    instance: np.ndarray  # (H, W) uint8 actor id, 0 = background
    object_depth: np.ndarray  # (H, W) depth of scene objects, inf where none


def world_to_camera(camera: CameraRig, p) -> np.ndarray:
    R = camera.pose.rotation.as_matrix()
    return (np.asarray(p, dtype=float) - camera.pose.translation) @ R


def project_point(camera: CameraRig, p_world) -> tuple[float, float, float] | None:
    """Pinhole projection to ``(u, v, depth)``; None when the point is not in front of the camera.

    ``v`` grows downward in the image, so camera +y maps to smaller ``v``.
    """
    x, y, z = world_to_camera(camera, p_world)
    depth = -z
    if depth <= BEHIND_EPS:
        return None
    k = camera.intrinsics
    f = k.focal
    return f * x / depth + k.cx, k.cy - f * y / depth, float(depth)


def keypoints_2d(camera: CameraRig, joints_3d) -> list[tuple[float | None, float | None, bool]]:
    k = camera.intrinsics
    out = []
    for j in np.asarray(joints_3d, dtype=float).reshape(-1, 3):
        proj = project_point(camera, j)
        if proj is None:
            out.append((None, None, False))
            continue
        u, v, _ = proj
        out.append((u, v, bool(0 <= u < k.image_width and 0 <= v < k.image_height)))
    return out


def bbox_from_keypoints(keypoints, margin_fraction: float = 0.05, width: float | None = None, height: float | None = None) -> dict | None:
    """Tight box over visible keypoints, grown by a fraction of its larger side and clamped."""
    if margin_fraction < 0:
        raise ValueError("margin_fraction must be non-negative")
    vis = [(u, v) for u, v, ok in keypoints if ok]
    if not vis:
        return None
    us = [u for u, _ in vis]
    vs = [v for _, v in vis]
    x0, x1, y0, y1 = min(us), max(us), min(vs), max(vs)
    m = margin_fraction * max(x1 - x0, y1 - y0)
    x0, x1, y0, y1 = x0 - m, x1 + m, y0 - m, y1 + m
    if width is not None:
        x0, x1 = max(0.0, x0), min(float(width), x1)
    if height is not None:
        y0, y1 = max(0.0, y0), min(float(height), y1)
    return {"x_min": x0, "y_min": y0, "x_max": x1, "y_max": y1}


def pixel_rays(camera: CameraRig, width: int | None = None, height: int | None = None):
    """World-space unit rays through pixel centers, row-major; returns ``(dirs, depth_scale)``.

    ``depth_scale`` converts ray distance to camera-frame depth.
    """
    k = camera.intrinsics
    width = width or k.image_width
    height = height or k.image_height
    sx, sy = width / k.image_width, height / k.image_height
    f_x, f_y = k.focal * sx, k.focal * sy
    cx, cy = k.cx * sx, k.cy * sy
    jj, ii = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    xc = (ii + 0.5 - cx) / f_x
    yc = -(jj + 0.5 - cy) / f_y
    d = np.stack([xc, yc, -np.ones_like(xc)], axis=-1).reshape(-1, 3)
    n = np.linalg.norm(d, axis=1)
    d_cam = d / n[:, None]
    R = camera.pose.rotation.as_matrix()
    return d_cam @ R.T, -d_cam[:, 2]


def _capsule_pixel_hits(camera: CameraRig, dirs, width: int, height: int, a, b, radius: float):
    """Nearest capsule hit per pixel ray, testing each capsule only on the pixels
    covered by the projection of its camera-space bounding box (plus a margin)."""
    k = camera.intrinsics
    sx, sy = width / k.image_width, height / k.image_height
    fx, fy, cx, cy = k.focal * sx, k.focal * sy, k.cx * sx, k.cy * sy
    lo = np.minimum(a, b) - radius
    hi = np.maximum(a, b) + radius
    corners = np.stack([np.stack([np.where(m & 1, hi[:, 0], lo[:, 0]), np.where(m & 2, hi[:, 1], lo[:, 1]), np.where(m & 4, hi[:, 2], lo[:, 2])], -1) for m in range(8)], 1)
    cam = world_to_camera(camera, corners)  # (C, 8, 3)
    depth = -cam[..., 2]
    n = width * height
    behind = np.any(depth <= BEHIND_EPS, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * cam[..., 0] / depth + cx
        v = cy - fy * cam[..., 1] / depth
    i0 = np.where(behind, 0, np.floor(u.min(axis=1)) - 1)
    i1 = np.where(behind, width - 1, np.ceil(u.max(axis=1)) + 1)
    j0 = np.where(behind, 0, np.floor(v.min(axis=1)) - 1)
    j1 = np.where(behind, height - 1, np.ceil(v.max(axis=1)) + 1)
    cols = np.arange(width)
    rows = np.arange(height)
    in_col = (cols[None, :] >= i0[:, None]) & (cols[None, :] <= i1[:, None])
    in_row = (rows[None, :] >= j0[:, None]) & (rows[None, :] <= j1[:, None])
    mask = in_row[:, :, None] & in_col[:, None, :]  # (C, H, W)
    ci, ri = np.nonzero(mask.reshape(len(a), n))
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1)
    if ri.size == 0:
        return best_t, best_i
    t = ray_capsule_hits(camera.position[None, :], dirs[ri], a[ci], b[ci], radius)
    dense = np.full((n, len(a)), np.inf)
    dense[ri, ci] = t
    best_i = np.argmin(dense, axis=1)  # lowest capsule index wins ties
    best_t = dense[np.arange(n), best_i]
    best_i[~np.isfinite(best_t)] = -1
    return best_t, best_i


def render_proxy_maps(
    camera: CameraRig,
    actors: list[CapsuleProxy],
    objects: list[Box3],
    resolution: tuple[int, int] | None = None,
    actor_ids: list[int] | None = None,
) -> ProxyMaps:
    """One ray per pixel center; the nearest capsule or box wins.

    Actor ``k`` is labelled ``actor_ids[k]`` (default ``k + 1``). Objects
    occlude actors but keep instance 0; their depth goes to ``object_depth``.
    """
    width, height = resolution or (camera.intrinsics.image_width, camera.intrinsics.image_height)
    if width <= 0 or height <= 0:
        raise ValueError("resolution must be positive")
    dirs, scale = pixel_rays(camera, width, height)
    origin = camera.position[None, :]
    ids = actor_ids or [k + 1 for k in range(len(actors))]
    if actors:
        a = np.concatenate([c.a for c in actors])
        b = np.concatenate([c.b for c in actors])
        owner = np.concatenate([np.full(len(c), ids[k]) for k, c in enumerate(actors)])
        radii = {c.radius for c in actors}
        if len(radii) == 1:
            t_act, idx = _capsule_pixel_hits(camera, dirs, width, height, a, b, radii.pop())
        else:
            t_act = np.full(len(dirs), np.inf)
            idx = np.full(len(dirs), -1)
            start = 0
            for c in actors:
                t, i = _capsule_pixel_hits(camera, dirs, width, height, c.a, c.b, c.radius)
                better = t < t_act
                t_act[better] = t[better]
                idx[better] = i[better] + start
                start += len(c)
    else:
        t_act = np.full(len(dirs), np.inf)
        idx = np.full(len(dirs), -1)
        owner = np.zeros(0, dtype=int)
    t_obj = cast_boxes(origin, dirs, objects) if objects else np.full(len(dirs), np.inf)
    fg = np.isfinite(t_act) & (t_act < t_obj)
    instance = np.zeros(len(dirs), dtype=np.uint8)
    instance[fg] = owner[idx[fg]].astype(np.uint8)
    depth = np.where(fg, t_act * scale, np.inf)
    obj_depth = np.where(np.isfinite(t_obj), t_obj * scale, np.inf)
    return ProxyMaps(depth.reshape(height, width), instance.reshape(height, width), obj_depth.reshape(height, width))


def filter_occluded(records, max_occlusion: float = 0.7) -> list:
    """Keep records whose occlusion does not exceed the threshold (boundary kept)."""
    return [r for r in records if r.occlusion <= max_occlusion]


# -- file formats ----------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_pfm(path, depth: np.ndarray) -> None:
    """Little-endian single-channel PFM, rows stored bottom to top."""
    d = np.where(np.isfinite(depth), depth, PFM_BACKGROUND).astype("<f4")
    h, w = d.shape
    Path(path).write_bytes(f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"Pf":
        raise ValueError("not a greyscale PFM")
    w, h = (int(x) for x in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    return np.frombuffer(parts[3], dtype=dtype, count=w * h).reshape(h, w)[::-1].astype(np.float64)


def write_ndjson(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


def read_ndjson(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def reproject_record(camera: CameraRig, record: dict) -> list:
    """Recompute stored keypoints from stored joints, in the stored precision."""
    out = []
    for u, v, vis in keypoints_2d(camera, record["joints_3d"]):
        out.append([None if u is None else round9(u), None if v is None else round9(v), int(vis)])
    return out

