"""Object-mixed pseudo-labels: paste reliable object chips from batch images
2..K into image 1, gated by an IoU overlap threshold.

Chips are rotated and scaled about their box centre. A chip lives on an
integer pixel grid anchored at ``floor(new_box.x1), floor(new_box.y1)`` and is
only ever translated by whole pixels, so the stored label box and the pasted
footprint stay aligned exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import BBox, iou
from .reliability import ScoredPseudoLabel, filter_reliable

PLACEMENTS = ("source-position", "random-retry")


class ChipError(ValueError):
    """Raised when a transformed chip degenerates."""


@dataclass(frozen=True)
class MixConfig:
    delta: float = 0.2
    rotation_range: tuple = (-30.0, 30.0)
    scale_range: tuple = (0.8, 1.25)
    gamma_hat: float = 0.5
    max_pastes_per_image: Optional[int] = None
    placement: str = "random-retry"
    max_retries: int = 10
    min_area: float = 1.0
    rotate_role: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad scale range {self.scale_range}")
        if self.rotation_range[1] < self.rotation_range[0]:
            raise ValueError(f"bad rotation range {self.rotation_range}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if self.max_pastes_per_image is not None and self.max_pastes_per_image < 0:
            raise ValueError("max_pastes_per_image must be nonnegative")
        if self.max_retries < 0:
            raise ValueError("max_retries must be nonnegative")


@dataclass(frozen=True)
class PasteRecord:
    source_image_id: str
    source_label_id: str
    source_box: BBox
    rotation: float
    scale: float
    offset: tuple
    dest_box: Optional[BBox]
    accepted: bool
    reason: str = ""
    attempts: int = 0


@dataclass
class MixPlan:
    target_image_id: str
    pastes: list = field(default_factory=list)
    gating_boxes: list = field(default_factory=list)

    @property
    def accepted(self) -> list:
        return [p for p in self.pastes if p.accepted]

    @property
    def rejected(self) -> list:
        return [p for p in self.pastes if not p.accepted]


@dataclass
class MixedImage:
    image_id: str
    raster: np.ndarray
    labels: list


@dataclass
class BatchItem:
    image_id: str
    raster: np.ndarray
    labels: Sequence[ScoredPseudoLabel] = ()


def transform_box(box: BBox, pivot, rotation: float, scale: float) -> BBox:
    """Axis-aligned hull of ``box`` rotated by ``rotation`` degrees and scaled
    about ``pivot``."""
    if rotation == 0.0 and scale == 1.0:
        return box
    theta = math.radians(rotation)
    c, s = math.cos(theta), math.sin(theta)
    px, py = pivot
    xs, ys = [], []
    for x, y in ((box.x1, box.y1), (box.x2, box.y1), (box.x2, box.y2), (box.x1, box.y2)):
        dx, dy = x - px, y - py
        xs.append(px + scale * (c * dx - s * dy))
        ys.append(py + scale * (s * dx + c * dy))
    return box.with_coords(min(xs), min(ys), max(xs), max(ys))


def shift_box(box: BBox, offset) -> BBox:
    dx, dy = offset
    if dx == 0 and dy == 0:
        return box
    return box.with_coords(box.x1 + dx, box.y1 + dy, box.x2 + dx, box.y2 + dy)


def paste_map_box(record: PasteRecord, box: BBox) -> BBox:
    """Where a source-image box lands in the target image under a paste."""
    moved = transform_box(box, record.source_box.center, record.rotation, record.scale)
    return shift_box(moved, record.offset)


def _chip_grid(box: BBox) -> tuple[int, int, int, int]:
    x0, y0 = math.floor(box.x1), math.floor(box.y1)
    x1, y1 = math.ceil(box.x2), math.ceil(box.y2)
    return x0, y0, x1, y1


def augment_chip(img: np.ndarray, b: BBox, rotation: float, scale: float,
                 min_area: float = 1.0) -> tuple[np.ma.MaskedArray, BBox]:
    """Crop ``b`` from ``img``, scale and rotate it about its centre.

    Returns the chip as a masked array (masked = transparent, outside the
    rotated footprint) whose top-left pixel sits at
    ``(floor(new_box.x1), floor(new_box.y1))``, plus the chip's axis-aligned
    bounding box.
    """
    img = np.asarray(img)
    if scale <= 0:
        raise ChipError("scale must be positive")
    new_box = transform_box(b, b.center, rotation, scale)
    if new_box.area < min_area:
        raise ChipError(f"chip area {new_box.area:.3g} below minimum {min_area}")
    x0, y0, x1, y1 = _chip_grid(new_box)
    u = np.arange(x0, x1) + 0.5
    v = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(u, v)
    # inverse map of every chip pixel centre into the source image
    theta = math.radians(rotation)
    c, s = math.cos(theta), math.sin(theta)
    px, py = b.center
    dx, dy = (gx - px) / scale, (gy - py) / scale
    sx = px + c * dx + s * dy
    sy = py - s * dx + c * dy
    inside = (sx >= b.x1) & (sx <= b.x2) & (sy >= b.y1) & (sy <= b.y2)
    if not inside.any():
        raise ChipError("chip footprint covers no pixel centre")
    vals = ndimage.map_coordinates(img.astype(np.float64), [sy - 0.5, sx - 0.5],
                                   order=1, mode="nearest")
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        vals = np.clip(np.rint(vals), info.min, info.max)
    chip = np.ma.MaskedArray(vals.astype(img.dtype), mask=~inside)
    return chip, new_box


def overlap_gate(candidate: BBox, existing: Sequence[BBox], delta: float) -> int:
    """1 iff the candidate's IoU with every existing box is below ``delta``."""
    return int(all(iou(candidate, e) < delta for e in existing))


def _fit_offsets(box: BBox, width: int, height: int):
    """Integer shift ranges keeping ``box``'s pixel grid inside the frame."""
    x0, y0, x1, y1 = _chip_grid(box)
    return (-x0, width - x1), (-y0, height - y1)


def _clamp_offset(box: BBox, width: int, height: int):
    (lx, hx), (ly, hy) = _fit_offsets(box, width, height)
    if lx > hx or ly > hy:
        return None
    return (min(max(0, lx), hx), min(max(0, ly), hy))


def composite(target: np.ndarray, chip: np.ma.MaskedArray, origin) -> None:
    """Opaque chip-over-background paste, in place."""
    ox, oy = origin
    h, w = chip.shape
    region = target[oy:oy + h, ox:ox + w]
    opaque = ~np.ma.getmaskarray(chip)
    region[opaque] = np.asarray(chip.data, dtype=target.dtype)[opaque]


def mix_batch(batch: Sequence, cfg: MixConfig = MixConfig(), batch_id: int = 0,
              target_index: int = 0) -> tuple[MixedImage, MixPlan]:
    """Paste reliable chips from every other image of ``batch`` into one target.

    ``batch`` holds :class:`BatchItem` or ``(image_id, raster, labels)``
    triples. The target is ``batch[target_index]`` (image 1 by default).
    """
    items = [it if isinstance(it, BatchItem) else BatchItem(*it) for it in batch]
    if not items:
        raise ValueError("empty batch")
    items = [items[target_index]] + items[:target_index] + items[target_index + 1:]
    first = items[0]
    out = np.array(first.raster, copy=True)
    height, width = out.shape[:2]
    own = filter_reliable(first.labels, cfg.gamma_hat)
    plan = MixPlan(first.image_id, gating_boxes=[lab.box for lab in own])
    labels = list(own)
    if len(items) < 2:
        return MixedImage(first.image_id, out, labels), plan

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, batch_id]))
    gating = list(plan.gating_boxes)
    n_accepted = 0
    for item in items[1:]:
        for lab in filter_reliable(item.labels, cfg.gamma_hat):
            rotation = float(rng.uniform(*cfg.rotation_range))
            scale = float(rng.uniform(*cfg.scale_range))

            def record(accepted, reason, dest=None, offset=(0, 0), attempts=0):
                return PasteRecord(item.image_id, lab.label_id, lab.box, rotation, scale,
                                   offset, dest, accepted, reason, attempts)

            if cfg.max_pastes_per_image is not None and n_accepted >= cfg.max_pastes_per_image:
                plan.pastes.append(record(False, "paste-limit"))
                continue
            try:
                chip, new_box = augment_chip(item.raster, lab.box, rotation, scale,
                                             cfg.min_area)
            except ChipError as exc:
                plan.pastes.append(record(False, f"degenerate: {exc}"))
                continue

            offset = _clamp_offset(new_box, width, height)
            if offset is None:
                plan.pastes.append(record(False, "chip larger than target"))
                continue
            candidates = [offset]
            if cfg.placement == "random-retry":
                (lx, hx), (ly, hy) = _fit_offsets(new_box, width, height)
                for _ in range(cfg.max_retries):
                    candidates.append((int(rng.integers(lx, hx + 1)),
                                       int(rng.integers(ly, hy + 1))))
            placed = None
            for attempt, off in enumerate(candidates, start=1):
                dest = shift_box(new_box, off)
                if overlap_gate(dest, gating, cfg.delta):
                    placed = (off, dest, attempt)
                    break
            if placed is None:
                plan.pastes.append(record(False, "overlap", shift_box(new_box, candidates[-1]),
                                          candidates[-1], len(candidates)))
                continue
            off, dest, attempt = placed
            x0, y0, _, _ = _chip_grid(new_box)
            composite(out, chip, (x0 + off[0], y0 + off[1]))
            gating.append(dest)
            n_accepted += 1
            plan.pastes.append(record(True, "", dest, off, attempt))
            labels.append(ScoredPseudoLabel(f"{lab.label_id}@{first.image_id}",
                                            first.image_id, dest, lab.reliability,
                                            lab.evidence))
    return MixedImage(first.image_id, out, labels), plan
