"""Random generators and brute-force oracles shared by the test modules.

Oracles deliberately avoid the package's own math: rotations are rebuilt from
axis-angle with Rodrigues' formula and FK is a plain recursion over 3x3 matrices.
"""

from __future__ import annotations

import math

import numpy as np

from humansynth.kinematics import Bone, PoseFrame, Rotation, Skeleton


def rodrigues(axis, angle) -> np.ndarray:
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def random_axis_angles(rng, n, max_angle=math.pi):
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    return axes, rng.uniform(-max_angle, max_angle, size=n)


def random_skeleton(rng, n_bones, chain=False) -> Skeleton:
    bones = [Bone("b0", None, tuple(rng.normal(size=2)) + (float(rng.uniform(0.5, 1.5)),))]
    for i in range(1, n_bones):
        p = i - 1 if chain else int(rng.integers(i))
        bones.append(Bone(f"b{i}", p, tuple(rng.normal(scale=0.3, size=3))))
    return Skeleton(bones, 0)


def random_pose(rng, n_bones, max_angle=math.pi):
    axes, angles = random_axis_angles(rng, n_bones, max_angle)
    pose = PoseFrame(rng.normal(size=3), tuple(Rotation.from_axis_angle(a, t) for a, t in zip(axes, angles)))
    mats = [rodrigues(a, t) for a, t in zip(axes, angles)]
    return pose, mats


def matrix_fk(skeleton: Skeleton, root_translation, local_mats):
    """Recursive oracle: global matrix and joint position of every bone."""
    cache_g, cache_p = {}, {}

    def glob(i):
        if i not in cache_g:
            p = skeleton.bones[i].parent
            cache_g[i] = local_mats[i] if p is None else glob(p) @ local_mats[i]
        return cache_g[i]

    def pos(i):
        if i not in cache_p:
            b = skeleton.bones[i]
            off = np.asarray(b.rest_offset, dtype=float)
            cache_p[i] = np.asarray(root_translation, dtype=float) + off if b.parent is None else pos(b.parent) + glob(b.parent) @ off
        return cache_p[i]

    n = len(skeleton.bones)
    return [glob(i) for i in range(n)], np.array([pos(i) for i in range(n)])


def quat_matrix_gap(r: Rotation, m: np.ndarray) -> float:
    return float(np.max(np.abs(r.as_matrix() - m)))


def ray_march_capsule(origin, direction, a, b, radius, t_max, steps=10_000):
    """Fixed-step march on the capsule distance function, refined by bisection."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)

    def sdf(t):
        p = o + t * d
        ab = b - a
        denom = float(ab @ ab)
        s = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
        return float(np.linalg.norm(p - (a + s * ab))) - radius

    ts = np.linspace(0.0, t_max, steps + 1)
    prev = sdf(ts[0])
    for k in range(1, len(ts)):
        cur = sdf(ts[k])
        if prev > 0 >= cur:
            lo, hi = ts[k - 1], ts[k]
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if sdf(mid) > 0:
                    lo = mid
                else:
                    hi = mid
            return hi
        prev = cur
    return None


def enumerate_cells(bounds, obstacles, placed, l, w, step, dispersal):  # noqa: E741
    """Pure-Python feasible grid cells: inside bounds, no positive-area overlap, within dispersal."""
    xmin, ymin, xmax, ymax = bounds
    cells = []
    i = 0
    while xmin + i * step <= xmax:
        x = xmin + i * step
        j = 0
        while ymin + j * step <= ymax:
            y = ymin + j * step
            ok = x - l / 2 >= xmin and x + l / 2 <= xmax and y - w / 2 >= ymin and y + w / 2 <= ymax
            for b in list(obstacles) + list(placed):
                ox = min(x + l / 2, b.x + b.l / 2) - max(x - l / 2, b.x - b.l / 2)
                oy = min(y + w / 2, b.y + b.w / 2) - max(y - w / 2, b.y - b.w / 2)
                if ox > 0 and oy > 0:
                    ok = False
            if ok and placed:
                cx = sum(a.x for a in placed) / len(placed)
                cy = sum(a.y for a in placed) / len(placed)
                ok = math.hypot(x - cx, y - cy) <= dispersal
            if ok:
                cells.append((x, y))
            j += 1
        i += 1
    return cells
