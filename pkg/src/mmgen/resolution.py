"""Resolution buckets for progressive flexible-resolution finetuning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .imagecodec import RasterImage

_TIE_EPS = 1e-12


@dataclass(frozen=True, order=True)
class ResolutionBucket:
    width_px: int
    height_px: int

    @property
    def area(self) -> int:
        return self.width_px * self.height_px

    def grid_shape(self, patch_px: int) -> tuple[int, int]:
        """(rows, cols) in patch units."""
        return self.height_px // patch_px, self.width_px // patch_px


@dataclass(frozen=True)
class Stage:
    target_area: int
    area_tolerance: float
    aspect_range: tuple[float, float]
    buckets: tuple[ResolutionBucket, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "target_area": self.target_area,
            "area_tolerance": self.area_tolerance,
            "aspect_range": list(self.aspect_range),
            "buckets": [[b.width_px, b.height_px] for b in self.buckets],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Stage":
        return cls(
            target_area=int(data["target_area"]),
            area_tolerance=float(data["area_tolerance"]),
            aspect_range=tuple(data["aspect_range"]),
            buckets=tuple(ResolutionBucket(int(w), int(h)) for w, h in data.get("buckets", [])),
        )


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        areas = [s.target_area for s in self.stages]
        if any(b <= a for a, b in zip(areas, areas[1:])):
            raise ValueError(f"stage target areas must strictly increase, got {areas}")

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, data: dict) -> "StagePlan":
        return cls(tuple(Stage.from_dict(s) for s in data["stages"]))


def gen_buckets(
    target_area: int,
    patch_px: int,
    tolerance: float,
    aspect_range: Sequence[float],
    max_side: int | None = None,
) -> list[ResolutionBucket]:
    """All (w, h) multiples of ``patch_px`` with area within ``tolerance`` of the
    target and ``w / h`` inside ``aspect_range`` (inclusive), sorted by (w, h).

    ``max_side`` (patch units) additionally bounds each side.
    """
    if not 0 < tolerance < 1:
        raise ValueError(f"tolerance must lie in (0, 1), got {tolerance}")
    lo, hi = aspect_range
    if not 0 < lo <= hi:
        raise ValueError(f"invalid aspect range {aspect_range}")
    limit = int(target_area * (1 + tolerance) // patch_px)
    if max_side is not None:
        limit = min(limit, max_side * patch_px)
    out = []
    for w in range(patch_px, limit + 1, patch_px):
        # heights whose area can fall inside the tolerance band, widened by one patch
        h_lo = max(patch_px, int(target_area * (1 - tolerance) / w) // patch_px * patch_px)
        h_hi = min(limit, int(target_area * (1 + tolerance) / w) + patch_px)
        for h in range(h_lo, h_hi + 1, patch_px):
            if abs(w * h - target_area) <= tolerance * target_area and lo <= w / h <= hi:
                out.append(ResolutionBucket(w, h))
    if not out:
        raise ValueError(f"no bucket near area {target_area} with aspect in [{lo}, {hi}]")
    return out


def match_bucket(image_w: int, image_h: int, buckets: Sequence[ResolutionBucket]) -> ResolutionBucket:
    """Closest bucket in log-aspect; ties go to larger area, then smallest (w, h)."""
    if not buckets:
        raise ValueError("no buckets to match against")
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    target = math.log(image_w / image_h)
    dist = [abs(math.log(b.width_px / b.height_px) - target) for b in buckets]
    best = min(dist)
    tied = [b for b, d in zip(buckets, dist) if d <= best + _TIE_EPS]
    return min(tied, key=lambda b: (-b.area, b.width_px, b.height_px))


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) box-filter resampling matrix; rows sum to one."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    j = np.arange(n_in)[None, :]
    w = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def resize(image: RasterImage, width: int, height: int) -> RasterImage:
    if (width, height) == (image.width, image.height):
        return image
    wy = _area_weights(image.height, height)
    wx = _area_weights(image.width, width)
    rows = np.tensordot(wy, image.pixels, axes=(1, 0))  # (height, in_w, 3)
    return RasterImage(np.einsum("lk,ikc->ilc", wx, rows, optimize=True))


def fit_image(image: RasterImage, bucket: ResolutionBucket) -> RasterImage:
    """Scale uniformly to cover the bucket, then center-crop to it."""
    if image.width < 1 or image.height < 1:
        raise ValueError("cannot fit a degenerate image")
    scale = max(bucket.width_px / image.width, bucket.height_px / image.height)
    new_w = max(bucket.width_px, round(image.width * scale))
    new_h = max(bucket.height_px, round(image.height * scale))
    scaled = resize(image, new_w, new_h)
    x0 = (new_w - bucket.width_px) // 2
    y0 = (new_h - bucket.height_px) // 2
    return RasterImage(scaled.pixels[y0 : y0 + bucket.height_px, x0 : x0 + bucket.width_px])


def default_stage_plan(
    patch_px: int = 8,
    max_side: int = 16,
    sides_px: Sequence[int] = (64, 96, 128),
    tolerance: float = 0.15,
    aspect_range: tuple[float, float] = (0.5, 2.0),
) -> StagePlan:
    """Three stages with side ratios 1 : 1.5 : 2 (grids 8, 12, 16 at patch 8)."""
    stages = []
    for side in sides_px:
        area = side * side
        buckets = gen_buckets(area, patch_px, tolerance, aspect_range, max_side)
        stages.append(Stage(area, tolerance, tuple(aspect_range), tuple(buckets)))
    return StagePlan(tuple(stages))
