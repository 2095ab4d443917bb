"""Crop-rectangle geometry: seeded sampling, area enforcement, area statistics.

All coordinates are relative to the image: (x, y) is the top-left corner in
[0, 1), (w, h) the extent in (0, 1]. No pixels are touched here; rasterizing
a rect is the exporter's job.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import EmptyInput, InfeasibleConstraint, InvalidRect
from .rng import derive_rng

DEFAULT_MIN_AREA = 0.08
DEFAULT_ASPECT = (3.0 / 4.0, 4.0 / 3.0)

_MAX_ATTEMPTS = 100
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class CropRect:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        ok = (
            0.0 <= self.x < 1.0
            and 0.0 <= self.y < 1.0
            and 0.0 < self.w <= 1.0
            and 0.0 < self.h <= 1.0
            and self.x + self.w <= 1.0 + _EDGE_TOL
            and self.y + self.h <= 1.0 + _EDGE_TOL
        )
        if not ok:
            raise InvalidRect(f"rect outside unit square: {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def aspect(self) -> float:
        return self.w / self.h

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_json(cls, d: Mapping) -> "CropRect":
        return cls(float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"]))


def max_feasible_area(aspect_range: tuple[float, float]) -> float:
    """Largest area a unit-square rect can reach with aspect w/h in the range."""
    lo, hi = aspect_range
    if lo <= 1.0 <= hi:
        return 1.0
    return hi if hi < 1.0 else 1.0 / lo


def _check_constraints(min_area_ratio: float, aspect_range: tuple[float, float]) -> None:
    lo, hi = aspect_range
    if not (0.0 < min_area_ratio <= 1.0):
        raise InfeasibleConstraint(f"min_area_ratio {min_area_ratio} not in (0, 1]")
    if not (0.0 < lo <= hi):
        raise InfeasibleConstraint(f"aspect range ({lo}, {hi}) is empty or non-positive")
    if min_area_ratio > max_feasible_area(aspect_range) + _EDGE_TOL:
        raise InfeasibleConstraint(
            f"no rect has area >= {min_area_ratio} with aspect in [{lo}, {hi}]"
        )


def _fallback_rect(min_area_ratio: float, aspect_range: tuple[float, float]) -> CropRect:
    # Centered rect at the most square-like feasible aspect, area = min_area_ratio.
    lo, hi = aspect_range
    ratio = min(max(1.0, lo), hi)
    w = math.sqrt(min_area_ratio * ratio)
    h = math.sqrt(min_area_ratio / ratio)
    w, h = min(w, 1.0), min(h, 1.0)
    return CropRect((1.0 - w) / 2.0, (1.0 - h) / 2.0, w, h)


def sample_crops(
    image_id: str,
    count: int,
    seed: int,
    min_area_ratio: float = DEFAULT_MIN_AREA,
    aspect_range: tuple[float, float] = DEFAULT_ASPECT,
) -> list[CropRect]:
    """Draw ``count`` random rects for one image, deterministic in (image_id, seed).

    Area fraction is uniform in [min_area_ratio, 1], aspect log-uniform in
    ``aspect_range``; draws that spill outside the unit square are rejected and,
    after 100 attempts, replaced by a centered constraint-satisfying rect.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    _check_constraints(min_area_ratio, aspect_range)
    lo, hi = aspect_range
    rng = derive_rng(seed, image_id)
    rects: list[CropRect] = []
    for _ in range(count):
        rect = None
        for _attempt in range(_MAX_ATTEMPTS):
            area = rng.uniform(min_area_ratio, 1.0)
            ratio = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            w = math.sqrt(area * ratio)
            h = math.sqrt(area / ratio)
            if w <= 1.0 and h <= 1.0:
                x = rng.uniform(0.0, 1.0 - w)
                y = rng.uniform(0.0, 1.0 - h)
                rect = CropRect(x, y, w, h)
                break
        rects.append(rect if rect is not None else _fallback_rect(min_area_ratio, aspect_range))
    return rects


def enforce_min_area(rect: CropRect, min_area_ratio: float) -> CropRect:
    """Expand ``rect`` about its center until its area reaches ``min_area_ratio``.

    Aspect is preserved unless one side hits the image border, in which case
    the other side absorbs the remainder; position is clamped into the unit
    square. Rects already large enough are returned unchanged (idempotent).
    """
    if not (0.0 < min_area_ratio <= 1.0):
        raise ValueError("min_area_ratio must be in (0, 1]")
    if rect.area >= min_area_ratio * (1.0 - 1e-12):
        return rect
    scale = math.sqrt(min_area_ratio / rect.area)
    w, h = rect.w * scale, rect.h * scale
    if w > 1.0:
        w, h = 1.0, min_area_ratio
    elif h > 1.0:
        h, w = 1.0, min_area_ratio
    cx, cy = rect.x + rect.w / 2.0, rect.y + rect.h / 2.0
    x = min(max(cx - w / 2.0, 0.0), 1.0 - w)
    y = min(max(cy - h / 2.0, 0.0), 1.0 - h)
    return CropRect(x, y, w, h)


def snf_ratio(rects: Sequence[CropRect]) -> float:
    """Mean area fraction of the given (foreground) rects."""
    if not rects:
        raise EmptyInput("snf_ratio needs at least one rect")
    return sum(r.area for r in rects) / len(rects)


@dataclass
class CropPlan:
    """Per-image crop rects plus everything needed to regenerate them."""

    seed: int
    min_area_ratio: float
    aspect_range: tuple[float, float]
    images: dict[str, list[CropRect]]

    @classmethod
    def generate(
        cls,
        image_ids: Iterable[str],
        count: int,
        seed: int,
        min_area_ratio: float = DEFAULT_MIN_AREA,
        aspect_range: tuple[float, float] = DEFAULT_ASPECT,
    ) -> "CropPlan":
        images = {
            image_id: sample_crops(image_id, count, seed, min_area_ratio, aspect_range)
            for image_id in image_ids
        }
        return cls(seed=seed, min_area_ratio=min_area_ratio, aspect_range=aspect_range, images=images)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "min_area_ratio": self.min_area_ratio,
            "aspect": [self.aspect_range[0], self.aspect_range[1]],
            "images": {img: [r.to_json() for r in rects] for img, rects in self.images.items()},
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "CropPlan":
        aspect = d["aspect"]
        return cls(
            seed=int(d["seed"]),
            min_area_ratio=float(d["min_area_ratio"]),
            aspect_range=(float(aspect[0]), float(aspect[1])),
            images={
                img: [CropRect.from_json(r) for r in rects]
                for img, rects in d["images"].items()
            },
        )
