"""Augmented views (mirror, scale) for boxes and rasters, plus weak/strong
photometric-geometric augmentation of the student path.

Rasters are 2-D numpy arrays (grayscale), either uint8 in [0, 255] or float
in [0, 1]. Every operation returns a new array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .geometry import BBox

IDENTITY = "identity"
MIRROR = "mirror"
SCALE = "scale"
KINDS = (IDENTITY, MIRROR, SCALE)


@dataclass(frozen=True)
class ViewTransform:
    kind: str
    image_width: int
    image_height: int
    scale_factor: float = 1.0
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown view kind {self.kind!r}")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    @property
    def name(self) -> str:
        return self.kind

    @property
    def output_size(self) -> tuple[int, int]:
        """(width, height) of the view's frame."""
        if self.kind == SCALE:
            return (max(1, int(round(self.image_width * self.scale_factor))),
                    max(1, int(round(self.image_height * self.scale_factor))))
        return (self.image_width, self.image_height)


@dataclass(frozen=True)
class ViewSpec:
    """Frame-free description of a view, as it appears in configs."""

    kind: str
    scale_factor: float = 1.0

    def bind(self, width: int, height: int, interpolation: str = "bilinear") -> ViewTransform:
        return ViewTransform(self.kind, int(width), int(height),
                             self.scale_factor, interpolation)


def identity_view(width: int, height: int) -> ViewTransform:
    return ViewTransform(IDENTITY, int(width), int(height))


def forward_box(t: ViewTransform, b: BBox) -> BBox:
    """Map a source-frame box into the view's frame."""
    if t.kind == IDENTITY:
        return b
    if t.kind == MIRROR:
        w = float(t.image_width)
        return b.with_coords(w - b.x2, b.y1, w - b.x1, b.y2)
    s = t.scale_factor
    return b.with_coords(b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s)


def inverse_box(t: ViewTransform, b: BBox) -> BBox:
    """Map a view-frame box back into the source frame."""
    if t.kind == SCALE:
        s = t.scale_factor
        return b.with_coords(b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s)
    # identity and mirror are involutions
    return forward_box(t, b)


def _check_raster(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D raster, got shape {img.shape}")
    return img


def _cast_like(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    if np.issubdtype(like.dtype, np.integer):
        info = np.iinfo(like.dtype)
        return np.clip(np.rint(values), info.min, info.max).astype(like.dtype)
    return values.astype(like.dtype, copy=False)


def forward_raster(t: ViewTransform, img: np.ndarray) -> np.ndarray:
    img = _check_raster(img)
    if img.shape != (t.image_height, t.image_width):
        raise ValueError(f"raster shape {img.shape} does not match transform frame "
                         f"{t.image_width}x{t.image_height}")
    if t.kind == IDENTITY or (t.kind == SCALE and t.scale_factor == 1.0):
        return img.copy()
    if t.kind == MIRROR:
        return img[:, ::-1].copy()
    out_w, out_h = t.output_size
    s = t.scale_factor
    # pixel centres of the output grid, expressed in source pixel indices
    ys = (np.arange(out_h) + 0.5) / s - 0.5
    xs = (np.arange(out_w) + 0.5) / s - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    order = 1 if t.interpolation == "bilinear" else 0
    vals = ndimage.map_coordinates(img.astype(np.float64), grid, order=order,
                                   mode="nearest")
    return _cast_like(vals, img)


@dataclass(frozen=True)
class AugmentationPolicy:
    weak_flip_prob: float = 0.5
    strong_flip_prob: float = 0.5
    blur_sigma_range: tuple = (0.1, 2.0)

    def __post_init__(self):
        for p in (self.weak_flip_prob, self.strong_flip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability {p} outside [0, 1]")
        lo, hi = self.blur_sigma_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad blur sigma range {self.blur_sigma_range}")


@dataclass(frozen=True)
class AugmentDraw:
    """The random choices behind one weak or strong augmentation."""

    flip: bool
    blur_sigma: float = 0.0

    def transform(self, width: int, height: int) -> ViewTransform:
        return ViewTransform(MIRROR if self.flip else IDENTITY, int(width), int(height))


def sample_weak(policy: AugmentationPolicy, seed) -> AugmentDraw:
    rng = np.random.default_rng(seed)
    return AugmentDraw(flip=bool(rng.random() < policy.weak_flip_prob))


def sample_strong(policy: AugmentationPolicy, seed) -> AugmentDraw:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < policy.strong_flip_prob)
    lo, hi = policy.blur_sigma_range
    sigma = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return AugmentDraw(flip=flip, blur_sigma=sigma)


def apply_draw(draw: AugmentDraw, img: np.ndarray) -> np.ndarray:
    img = _check_raster(img)
    out = img[:, ::-1].copy() if draw.flip else img.copy()
    if draw.blur_sigma > 0:
        blurred = ndimage.gaussian_filter(out.astype(np.float64), draw.blur_sigma,
                                          mode="reflect")
        out = _cast_like(blurred, img)
    return out


def apply_weak(policy: AugmentationPolicy, img: np.ndarray, seed) -> np.ndarray:
    """Random horizontal flip only."""
    return apply_draw(sample_weak(policy, seed), img)


def apply_strong(policy: AugmentationPolicy, img: np.ndarray, seed) -> np.ndarray:
    """Random horizontal flip followed by Gaussian blur."""
    return apply_draw(sample_strong(policy, seed), img)


def view_specs_from_config(items) -> list[ViewSpec]:
    specs = []
    for item in items:
        if isinstance(item, ViewSpec):
            specs.append(item)
        else:
            specs.append(ViewSpec(item["kind"], float(item.get("scale_factor", 1.0))))
    return specs


def parse_view_name(name: str, width: int, height: int,
                    views: Optional[list] = None) -> ViewTransform:
    """Resolve a record's view string against the configured view specs."""
    if name == IDENTITY:
        return identity_view(width, height)
    for spec in views or []:
        if spec.kind == name:
            return spec.bind(width, height)
    if name == MIRROR:
        return ViewTransform(MIRROR, width, height)
    raise ValueError(f"view {name!r} is not configured")
