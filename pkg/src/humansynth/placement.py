"""Sequential collision-free placement of actors on a heightfield ground."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import Skeleton, fk_joint_positions
from .retarget import MotionClip

logger = logging.getLogger(__name__)

MIN_EXTENT = 0.3
DEFAULT_OBJECT_HEIGHT = 2.0


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class Footprint:
    """Ground-projected axis-aligned box: center (x, y), extent l along x, w along y."""

    x: float
    y: float
    l: float  # noqa: E741
    w: float
    h: float = DEFAULT_OBJECT_HEIGHT  # vertical extent; only used for 3D volumes

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0):
            raise PlacementError(f"footprint extents must be positive, got l={self.l}, w={self.w}")

    @property
    def xmin(self) -> float:
        return self.x - self.l / 2

    @property
    def xmax(self) -> float:
        return self.x + self.l / 2

    @property
    def ymin(self) -> float:
        return self.y - self.w / 2

    @property
    def ymax(self) -> float:
        return self.y + self.w / 2

    def contains(self, other: "Footprint") -> bool:
        return (
            self.xmin <= other.xmin and other.xmax <= self.xmax and self.ymin <= other.ymin and other.ymax <= self.ymax
        )

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "l": self.l, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> "Footprint":
        return cls(float(d["x"]), float(d["y"]), float(d["l"]), float(d["w"]), float(d.get("h", DEFAULT_OBJECT_HEIGHT)))


@dataclass
class Heightfield:
    """Ground elevation on a regular grid; ``values[j][i]`` sits at ``origin + (i, j) * cell``."""

    origin: tuple[float, float] = (0.0, 0.0)
    cell: float = 1.0
    values: np.ndarray | None = None
    constant: float = 0.0

    def __post_init__(self):
        if self.values is not None:
            self.values = np.asarray(self.values, dtype=float)
            if self.values.ndim != 2 or min(self.values.shape) < 2:
                raise PlacementError("heightfield values must be a 2D grid with at least 2x2 nodes")
            if not self.cell > 0:
                raise PlacementError("heightfield cell size must be positive")

    def height(self, x: float, y: float) -> float:
        if self.values is None:
            return float(self.constant)
        ny, nx = self.values.shape
        gx = (x - self.origin[0]) / self.cell
        gy = (y - self.origin[1]) / self.cell
        gx = min(max(gx, 0.0), nx - 1.0)
        gy = min(max(gy, 0.0), ny - 1.0)
        i = min(int(math.floor(gx)), nx - 2)
        j = min(int(math.floor(gy)), ny - 2)
        fx, fy = gx - i, gy - j
        v = self.values
        return float(
            (1 - fx) * (1 - fy) * v[j, i] + fx * (1 - fy) * v[j, i + 1] + (1 - fx) * fy * v[j + 1, i] + fx * fy * v[j + 1, i + 1]
        )

    def to_dict(self) -> dict:
        if self.values is None:
            return {"constant": self.constant}
        return {"origin": list(self.origin), "cell": self.cell, "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Heightfield":
        if "constant" in d:
            return cls(constant=float(d["constant"]))
        return cls(tuple(float(c) for c in d["origin"]), float(d["cell"]), np.asarray(d["values"], dtype=float))


@dataclass
class SceneLayout:
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    objects: list[Footprint] = field(default_factory=list)
    placed_actors: list[Footprint] = field(default_factory=list)
    heightfield: Heightfield = field(default_factory=Heightfield)
    name: str = "scene"

    def in_bounds(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax

    def to_dict(self) -> dict:
        return {
            "bounds": list(self.bounds),
            "objects": [o.to_dict() for o in self.objects],
            "heightfield": self.heightfield.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, name: str = "scene") -> "SceneLayout":
        return cls(
            tuple(float(c) for c in d["bounds"]),
            [Footprint.from_dict(o) for o in d.get("objects", [])],
            [],
            Heightfield.from_dict(d.get("heightfield", {"constant": 0.0})),
            name,
        )

    @classmethod
    def load(cls, path) -> "SceneLayout":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.stem)

    def fresh(self) -> "SceneLayout":
        """Copy without placed actors."""
        return SceneLayout(self.bounds, list(self.objects), [], self.heightfield, self.name)


@dataclass(frozen=True)
class PlacementConfig:
    grid_step: float = 0.25
    dispersal_radius: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not self.grid_step > 0:
            raise PlacementError("grid_step must be positive")
        if not self.dispersal_radius > 0:
            raise PlacementError("dispersal_radius must be positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> "PlacementConfig":
        return cls(**(d or {}))


def overlap_area(a: Footprint, b: Footprint) -> float:
    dx = min(a.x + a.l / 2, b.x + b.l / 2) - max(a.x - a.l / 2, b.x - b.l / 2)
    dy = min(a.y + a.w / 2, b.y + b.w / 2) - max(a.y - a.w / 2, b.y - b.w / 2)
    return max(0.0, dx) * max(0.0, dy)


def swept_footprint(per_frame_boxes) -> Footprint:
    """Smallest axis-aligned box enveloping every per-frame box."""
    boxes = list(per_frame_boxes)
    if not boxes:
        raise PlacementError("cannot sweep an empty box list")
    xmin = min(b.xmin for b in boxes)
    xmax = max(b.xmax for b in boxes)
    ymin = min(b.ymin for b in boxes)
    ymax = max(b.ymax for b in boxes)
    return Footprint((xmin + xmax) / 2, (ymin + ymax) / 2, xmax - xmin, ymax - ymin)


def joints_footprint(joints: np.ndarray, margin: float = 0.0) -> Footprint:
    lo = joints[:, :2].min(axis=0) - margin
    hi = joints[:, :2].max(axis=0) + margin
    cx, cy = (lo + hi) / 2
    l, w = np.maximum(hi - lo, MIN_EXTENT)  # noqa: E741
    return Footprint(float(cx), float(cy), float(l), float(w))


def actor_frame_boxes(skeleton: Skeleton, clip: MotionClip, margin: float = 0.1) -> list[Footprint]:
    """Per-frame ground AABB of the FK joints, grown by ``margin``; extents floor at 0.3."""
    if margin < 0:
        raise PlacementError("margin must be non-negative")
    return [joints_footprint(fk_joint_positions(skeleton, f), margin) for f in clip.frames]


def ground_height(scene: SceneLayout, x: float, y: float) -> float:
    if not scene.in_bounds(x, y):
        raise PlacementError(f"({x}, {y}) lies outside the scene bounds")
    return scene.heightfield.height(x, y)


def grid_axis(lo: float, hi: float, extent: float, step: float) -> np.ndarray:
    """Grid coordinates ``lo + i*step`` whose box of size ``extent`` stays inside ``[lo, hi]``."""
    n = int(math.floor((hi - lo) / step)) + 1
    coords = lo + np.arange(n) * step
    keep = (coords - extent / 2 >= lo) & (coords + extent / 2 <= hi)
    return coords[keep]


def feasible_cells(scene: SceneLayout, l: float, w: float, cfg: PlacementConfig) -> np.ndarray:  # noqa: E741
    """All grid cells ``(x, y)`` satisfying the object, actor, bounds and dispersal constraints."""
    if not (l > 0 and w > 0):
        raise PlacementError("actor extents must be positive")
    xmin, ymin, xmax, ymax = scene.bounds
    xs = grid_axis(xmin, xmax, l, cfg.grid_step)
    ys = grid_axis(ymin, ymax, w, cfg.grid_step)
    if xs.size == 0 or ys.size == 0:
        return np.zeros((0, 2))
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    ok = np.ones(X.shape, dtype=bool)
    for b in list(scene.objects) + list(scene.placed_actors):
        dx = np.minimum(X + l / 2, b.x + b.l / 2) - np.maximum(X - l / 2, b.x - b.l / 2)
        dy = np.minimum(Y + w / 2, b.y + b.w / 2) - np.maximum(Y - w / 2, b.y - b.w / 2)
        ok &= np.maximum(0.0, dx) * np.maximum(0.0, dy) == 0.0
    if scene.placed_actors:
        cx = sum(a.x for a in scene.placed_actors) / len(scene.placed_actors)
        cy = sum(a.y for a in scene.placed_actors) / len(scene.placed_actors)
        ok &= np.sqrt((X - cx) * (X - cx) + (Y - cy) * (Y - cy)) <= cfg.dispersal_radius
    return np.stack([X[ok], Y[ok]], axis=1)


def place_actor(
    scene: SceneLayout, l: float, w: float, cfg: PlacementConfig, rng: np.random.Generator  # noqa: E741
) -> tuple[float, float, float] | None:
    """Grid search for a collision-free spot; picks uniformly among feasible cells.

    Returns ``(x, y, ground_z)`` and records the footprint in the scene, or
    None when no cell is feasible.
    """
    cells = feasible_cells(scene, l, w, cfg)
    if len(cells) == 0:
        logger.warning("no feasible cell for a %.2f x %.2f actor in %s", l, w, scene.name)
        return None
    x, y = cells[rng.integers(len(cells))]
    x, y = float(x), float(y)
    scene.placed_actors.append(Footprint(x, y, l, w))
    return x, y, ground_height(scene, x, y)
