"""Seeded sampling of layered actor configurations and sequence specs.

Asset layers are metadata for downstream renderers; only body shape has a
geometric effect inside this package.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .body import sample_shape

HAIR_REGIONS = ("fringe", "top", "temporal", "occipital", "bottom")


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class AssetCatalog:
    hair: int = 45
    garments: int = 68
    textures: int = 1038
    accessories: int = 46
    hair_guides: int = 12
    length_range: tuple[float, float] = (0.02, 0.45)
    curliness_range: tuple[float, float] = (0.0, 1.0)
    mapping_scale_range: tuple[float, float] = (0.5, 2.0)
    mapping_rotation_range: tuple[float, float] = (0.0, 360.0)
    accessory_probability: float = 0.3

    def __post_init__(self):
        for k in ("hair", "garments", "textures", "accessories", "hair_guides"):
            if getattr(self, k) < 1:
                raise CatalogError(f"catalog count {k!r} must be >= 1")
        for k in ("length_range", "curliness_range", "mapping_scale_range", "mapping_rotation_range"):
            lo, hi = getattr(self, k)
            if not lo <= hi:
                raise CatalogError(f"range {k!r} is inverted")
            object.__setattr__(self, k, (float(lo), float(hi)))
        if not 0 <= self.accessory_probability <= 1:
            raise CatalogError("accessory_probability must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "AssetCatalog":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in (d or {}).items()})

    @classmethod
    def load(cls, path) -> "AssetCatalog":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class HairConfig:
    template: int
    regions: tuple[str, ...]
    guide: int
    length: float
    curliness: float


@dataclass(frozen=True)
class TextureConfig:
    pattern: int
    decals: int
    bump: int
    mapping: dict
    color: tuple[float, float, float]


@dataclass(frozen=True)
class LayeredAssetConfig:
    hair: HairConfig
    garment: int
    texture: TextureConfig
    accessories: tuple[int, ...]

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, catalog: AssetCatalog) -> None:
        h, t = self.hair, self.texture
        checks = [
            0 <= h.template < catalog.hair,
            0 <= h.guide < catalog.hair_guides,
            len(h.regions) > 0 and set(h.regions) <= set(HAIR_REGIONS),
            catalog.length_range[0] <= h.length <= catalog.length_range[1],
            catalog.curliness_range[0] <= h.curliness <= catalog.curliness_range[1],
            0 <= self.garment < catalog.garments,
            all(0 <= x < catalog.textures for x in (t.pattern, t.decals, t.bump)),
            catalog.mapping_scale_range[0] <= t.mapping["scale"] <= catalog.mapping_scale_range[1],
            catalog.mapping_rotation_range[0] <= t.mapping["rotation"] <= catalog.mapping_rotation_range[1],
            all(0.0 <= c <= 1.0 for c in t.mapping["offset"]),
            all(0.0 <= c <= 1.0 for c in t.color),
            all(0 <= a < catalog.accessories for a in self.accessories),
            list(self.accessories) == sorted(set(self.accessories)),
        ]
        if not all(checks):
            raise CatalogError(f"config violates the catalog: {self}")


@dataclass(frozen=True)
class SequenceSpec:
    actors: tuple[LayeredAssetConfig, ...]
    clip_ids: tuple[int, ...]
    betas: tuple[tuple[float, ...], ...]
    duration: float
    fps: float
    n_cameras: int
    scene_id: int
    n_frames: int = field(init=False)

    def __post_init__(self):
        if not 1 <= len(self.actors) <= 4:
            raise CatalogError("a sequence holds 1 to 4 actors")
        if not 2.0 <= self.duration <= 10.0:
            raise CatalogError("duration must lie in [2, 10] seconds")
        if len(self.clip_ids) != len(self.actors) or len(self.betas) != len(self.actors):
            raise CatalogError("per-actor lists must match the actor count")
        object.__setattr__(self, "n_frames", int(round(self.duration * self.fps)) + 1)

    def to_dict(self) -> dict:
        return {
            "actors": [a.to_dict() for a in self.actors],
            "clip_ids": list(self.clip_ids),
            "betas": [list(b) for b in self.betas],
            "duration": self.duration,
            "fps": self.fps,
            "n_cameras": self.n_cameras,
            "scene_id": self.scene_id,
            "n_frames": self.n_frames,
        }


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_actor_config(rng: np.random.Generator, catalog: AssetCatalog) -> LayeredAssetConfig:
    """Uniform ids per layer, uniform parameters, independent accessory inclusion."""
    n_regions = len(HAIR_REGIONS)
    mask = int(rng.integers(1, 2**n_regions))  # uniform over non-empty region subsets
    regions = tuple(r for i, r in enumerate(HAIR_REGIONS) if mask >> i & 1)
    hair = HairConfig(
        template=int(rng.integers(catalog.hair)),
        regions=regions,
        guide=int(rng.integers(catalog.hair_guides)),
        length=_uniform(rng, *catalog.length_range),
        curliness=_uniform(rng, *catalog.curliness_range),
    )
    texture = TextureConfig(
        pattern=int(rng.integers(catalog.textures)),
        decals=int(rng.integers(catalog.textures)),
        bump=int(rng.integers(catalog.textures)),
        mapping={
            "scale": _uniform(rng, *catalog.mapping_scale_range),
            "rotation": _uniform(rng, *catalog.mapping_rotation_range),
            "offset": [float(x) for x in rng.uniform(0.0, 1.0, size=2)],
        },
        color=tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3)),
    )
    include = rng.uniform(size=catalog.accessories) < catalog.accessory_probability
    return LayeredAssetConfig(
        hair=hair,
        garment=int(rng.integers(catalog.garments)),
        texture=texture,
        accessories=tuple(int(i) for i in np.nonzero(include)[0]),
    )


def sample_sequence_spec(
    rng: np.random.Generator,
    catalog: AssetCatalog,
    n_clips: int,
    n_scenes: int,
    n_shapes: int = 10,
    shape_sigma: float = 1.0,
    fps: float = 30.0,
    n_cameras: int = 4,
    max_actors: int = 4,
    duration_range: tuple[float, float] = (2.0, 10.0),
) -> SequenceSpec:
    """1-4 actors, a 2-10 s duration, a clip per actor and a scene."""
    if not 1 <= max_actors <= 4:
        raise CatalogError("max_actors must lie in [1, 4]")
    if n_clips < 1:
        raise CatalogError("motion library is empty")
    if n_scenes < 1:
        raise CatalogError("scene list is empty")
    lo, hi = duration_range
    if not 2.0 <= lo <= hi <= 10.0:
        raise CatalogError("duration range must lie within [2, 10] seconds")
    n_actors = int(rng.integers(1, max_actors + 1))
    duration = float(rng.uniform(lo, hi))
    actors = tuple(sample_actor_config(rng, catalog) for _ in range(n_actors))
    clip_ids = tuple(int(rng.integers(n_clips)) for _ in range(n_actors))
    betas = tuple(tuple(float(b) for b in sample_shape(rng, n_shapes, shape_sigma)) for _ in range(n_actors))
    return SequenceSpec(actors, clip_ids, betas, duration, fps, n_cameras, int(rng.integers(n_scenes)))
