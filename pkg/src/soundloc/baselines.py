"""Naive geometric predictions: one centered box, or one box per quadrant."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .data import BoundingBox, Heatmap, boxes_union
from .errors import ContractError


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class BaselineSpec:
    kind: Literal["center", "quadrants"] = "center"
    area_frac: float | None = None
    square: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("center", "quadrants"):
            raise ContractError(f"unknown baseline kind {self.kind!r}")
        if self.area_frac is None:
            object.__setattr__(self, "area_frac", 0.5 if self.kind == "center" else 1 / 8)
        limit = 1.0 if self.kind == "center" else 0.25
        if not 0.0 < self.area_frac <= limit:
            raise ContractError(f"{self.kind} baseline area_frac must lie in (0, {limit}]")


def _box_size(width: int, height: int, area_frac: float, square: bool) -> tuple[int, int]:
    if square:
        side = round(math.sqrt(area_frac * width * height))
        return max(1, min(side, width)), max(1, min(side, height))
    scale = math.sqrt(area_frac)
    return max(1, round(width * scale)), max(1, round(height * scale))


def center_box(width: int, height: int, area_frac: float = 0.5, square: bool = False) -> BoundingBox:
    """Frame-centered box covering ``area_frac`` of the image.

    Sizes round half-to-even; the centering offset rounds half-up.
    """
    if not 0.0 < area_frac <= 1.0:
        raise ContractError("area_frac must lie in (0, 1]")
    w, h = _box_size(width, height, area_frac, square)
    return BoundingBox(_round_half_up((width - w) / 2), _round_half_up((height - h) / 2), w, h)


def quadrant_bounds(width: int, height: int) -> list[tuple[int, int, int, int]]:
    """(x0, y0, x1, y1) of the four quadrants, row-major from top-left."""
    mx, my = width // 2, height // 2
    return [(0, 0, mx, my), (mx, 0, width, my), (0, my, mx, height), (mx, my, width, height)]


def quadrant_boxes(width: int, height: int, area_frac_each: float = 1 / 8) -> list[BoundingBox]:
    if not 0.0 < area_frac_each <= 0.25:
        raise ContractError("area_frac_each must lie in (0, 0.25]")
    scale = math.sqrt(area_frac_each)
    w, h = max(1, round(width * scale)), max(1, round(height * scale))
    centers_x = (width / 4, 3 * width / 4)
    centers_y = (height / 4, 3 * height / 4)
    boxes = []
    for (x0, y0, x1, y1), (cx, cy) in zip(
        quadrant_bounds(width, height),
        [(centers_x[0], centers_y[0]), (centers_x[1], centers_y[0]), (centers_x[0], centers_y[1]), (centers_x[1], centers_y[1])],
    ):
        bw, bh = min(w, max(1, x1 - x0)), min(h, max(1, y1 - y0))
        x = min(max(_round_half_up(cx - bw / 2), x0), max(x0, x1 - bw))
        y = min(max(_round_half_up(cy - bh / 2), y0), max(y0, y1 - bh))
        boxes.append(BoundingBox(x, y, bw, bh))
    return boxes


def baseline_boxes(spec: BaselineSpec, width: int, height: int) -> list[BoundingBox]:
    if spec.kind == "center":
        return [center_box(width, height, spec.area_frac, spec.square)]
    return quadrant_boxes(width, height, spec.area_frac)


def baseline_heatmap(spec: BaselineSpec, width: int, height: int) -> Heatmap:
    mask = boxes_union(baseline_boxes(spec, width, height), width, height)
    return Heatmap(mask.astype(np.float32), normalized=True)
