"""Axis-aligned box algebra shared by every other module."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

PROB_TOL = 1e-6


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous pixel coordinates.

    ``probs`` is an optional class-probability vector; when present the box's
    ``class_id`` must attain its maximum and ``score`` must equal
    ``probs[class_id]``.
    """

    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0
    score: float = 1.0
    probs: Optional[tuple] = None

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"non-finite coordinate in {self!r}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.probs is not None:
            probs = tuple(float(p) for p in self.probs)
            object.__setattr__(self, "probs", probs)
            if not 0 <= self.class_id < len(probs):
                raise ValueError("class_id out of range of probs")
            if abs(sum(probs) - 1.0) > PROB_TOL:
                raise ValueError("probs must sum to 1")
            if abs(probs[self.class_id] - self.score) > PROB_TOL:
                raise ValueError("probs[class_id] must equal score")
            if probs[self.class_id] < max(probs) - 1e-12:
                raise ValueError("class_id must be the argmax of probs")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def with_coords(self, x1, y1, x2, y2) -> "BBox":
        """Same class/score/probs at new coordinates."""
        return replace(self, x1=float(x1), y1=float(y1), x2=float(x2), y2=float(y2))


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, 0 when disjoint."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: Sequence[BBox], boxes_b: Sequence[BBox]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou(a, b)
    return out


def corners(b: BBox) -> np.ndarray:
    """4x2 corner matrix, clockwise from top-left (image y axis points down)."""
    return np.array(
        [[b.x1, b.y1], [b.x2, b.y1], [b.x2, b.y2], [b.x1, b.y2]], dtype=np.float64
    )


def box_from_corners(c: np.ndarray, class_id: int = 0, score: float = 1.0) -> BBox:
    """Inverse of :func:`corners` for an axis-aligned corner matrix."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (4, 2):
        raise ValueError(f"corner matrix must be 4x2, got {c.shape}")
    return BBox(float(c[0, 0]), float(c[0, 1]), float(c[2, 0]), float(c[2, 1]),
                class_id=class_id, score=score)


def enclosing_rect(a: BBox, b: BBox) -> BBox:
    """Smallest axis-aligned box containing both inputs (carries a's labels)."""
    return a.with_coords(
        min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2)
    )


def diagonal_sq(b: BBox) -> float:
    return b.width ** 2 + b.height ** 2


def clip_to_image(b: BBox, width: float, height: float,
                  min_area: float = 1.0) -> Optional[BBox]:
    """Intersect ``b`` with the image frame; None if too little is left."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    x1, y1 = max(b.x1, 0.0), max(b.y1, 0.0)
    x2, y2 = min(b.x2, float(width)), min(b.y2, float(height))
    if x2 <= x1 or y2 <= y1 or (x2 - x1) * (y2 - y1) < min_area:
        return None
    if (x1, y1, x2, y2) == b.coords():
        return b
    return b.with_coords(x1, y1, x2, y2)


def contains(outer: BBox, inner: BBox) -> bool:
    return (outer.x1 <= inner.x1 and outer.y1 <= inner.y1
            and outer.x2 >= inner.x2 and outer.y2 >= inner.y2)
