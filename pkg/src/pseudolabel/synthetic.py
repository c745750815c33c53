"""Seeded noisy-oracle detector and synthetic sonar-like scenes.

The detector perturbs ground truth with coordinate jitter, class flips,
misses, Poisson false positives and a confidence model that drops with
localization error. ``correlated=True`` reuses one noise realization for all
views of an image (a stable detector); otherwise each view draws its own (an
unstable one).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import BBox, clip_to_image, iou
from .ompl import PasteRecord, paste_map_box
from .reliability import DetectionSet
from .views import ViewTransform, forward_box, identity_view

FP_STREAM = 0x7FFF


@dataclass(frozen=True)
class NoiseModel:
    jitter_sigma: float = 0.0
    class_flip_prob: float = 0.0
    miss_prob: float = 0.0
    false_positive_rate: float = 0.0
    base_confidence: float = 1.0
    confidence_slope: float = 0.5
    confidence_sigma: float = 0.0
    correlated: bool = False
    num_classes: int = 4
    fp_size_range: tuple = (8.0, 40.0)

    def __post_init__(self):
        for name in ("class_flip_prob", "miss_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("jitter_sigma", "confidence_sigma", "false_positive_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.base_confidence <= 1.0:
            raise ValueError("base_confidence must lie in [0, 1]")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        lo, hi = self.fp_size_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad fp_size_range {self.fp_size_range}")


def class_probs(class_id: int, score: float, num_classes: int) -> tuple:
    """Probability vector peaking at ``class_id`` with the rest spread evenly."""
    if num_classes == 1:
        return (1.0,)
    rest = (1.0 - score) / (num_classes - 1)
    probs = [rest] * num_classes
    probs[class_id] = score
    return tuple(probs)


def _view_key(view: ViewTransform) -> int:
    return zlib.crc32(f"{view.kind}:{view.scale_factor!r}".encode())


def _labelled(box: BBox, class_id: int, score: float, num_classes: int) -> BBox:
    # the argmax must stay on class_id, so the score cannot drop below 1/C
    score = max(float(score), 1.0 / num_classes)
    if num_classes == 1:
        score = 1.0
    return BBox(box.x1, box.y1, box.x2, box.y2, class_id=class_id, score=score,
                probs=class_probs(class_id, score, num_classes))


def predict(gt: Sequence[BBox], view: ViewTransform, noise: NoiseModel, seed: int,
            image_id: str = "") -> DetectionSet:
    """Noisy detections of ``gt`` (original frame) expressed in ``view``'s frame."""
    width, height = view.image_width, view.image_height
    vkey = _view_key(view)
    C = noise.num_classes
    out = []
    for i, g in enumerate(gt):
        key = [seed, i] if noise.correlated else [seed, vkey, i]
        rng = np.random.default_rng(key)
        u_miss = rng.random()
        jitter = rng.normal(0.0, 1.0, 4) * noise.jitter_sigma
        u_flip = rng.random()
        other = int(rng.integers(max(C - 1, 1)))
        conf_noise = rng.normal(0.0, 1.0) * noise.confidence_sigma
        if u_miss < noise.miss_prob:
            continue
        if noise.jitter_sigma > 0:
            xs = sorted((g.x1 + jitter[0], g.x2 + jitter[2]))
            ys = sorted((g.y1 + jitter[1], g.y2 + jitter[3]))
            if xs[1] - xs[0] < 1.0 or ys[1] - ys[0] < 1.0:
                continue
            box = clip_to_image(g.with_coords(xs[0], ys[0], xs[1], ys[1]), width, height)
            if box is None:
                continue
        else:
            box = g
        cls = g.class_id
        if C > 1 and u_flip < noise.class_flip_prob:
            cls = other if other < g.class_id else other + 1
        score = noise.base_confidence - noise.confidence_slope * (1.0 - iou(box, g))
        score = min(max(score + conf_noise, 0.0), 1.0)
        out.append(forward_box(view, _labelled(box, cls, score, C)))

    if noise.false_positive_rate > 0:
        key = [seed, FP_STREAM] if noise.correlated else [seed, vkey, FP_STREAM]
        rng = np.random.default_rng(key)
        for _ in range(int(rng.poisson(noise.false_positive_rate))):
            fp = _draw_false_positive(rng, gt, width, height, noise)
            if fp is not None:
                out.append(forward_box(view, fp))
    return DetectionSet(image_id, view.name, tuple(out), width, height)


def _draw_false_positive(rng, gt, width, height, noise: NoiseModel,
                         max_tries: int = 100) -> Optional[BBox]:
    lo, hi = noise.fp_size_range
    for _ in range(max_tries):
        w = min(rng.uniform(lo, hi), width - 1.0)
        h = min(rng.uniform(lo, hi), height - 1.0)
        x1 = rng.uniform(0.0, width - w)
        y1 = rng.uniform(0.0, height - h)
        cls = int(rng.integers(noise.num_classes))
        score = rng.uniform(0.5, 1.0)
        if w < 1.0 or h < 1.0:
            continue
        box = BBox(x1, y1, x1 + w, y1 + h)
        if all(iou(box, g) < 0.5 for g in gt):
            return _labelled(box, cls, score, noise.num_classes)
    return None


def make_scene(seed: int, width: int = 128, height: int = 128, num_classes: int = 4,
               n_objects: tuple = (1, 4), size_range: tuple = (12, 40),
               max_overlap: float = 0.05):
    """A speckled grayscale raster with bright rectangular objects.

    Object boxes have integer coordinates so mirror and 0.75-scale views map
    them exactly.
    """
    rng = np.random.default_rng([seed, 0x5CE7E])
    raster = rng.rayleigh(18.0, size=(height, width))
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    gt: list[BBox] = []
    for _ in range(50 * n):
        if len(gt) == n:
            break
        w = int(rng.integers(size_range[0], size_range[1] + 1))
        h = int(rng.integers(size_range[0], size_range[1] + 1))
        w, h = min(w, width - 1), min(h, height - 1)
        x1 = int(rng.integers(0, width - w + 1))
        y1 = int(rng.integers(0, height - h + 1))
        box = BBox(x1, y1, x1 + w, y1 + h, class_id=int(rng.integers(num_classes)))
        if any(iou(box, g) > max_overlap for g in gt):
            continue
        gt.append(box)
    for g in gt:
        level = 120.0 + 120.0 * (g.class_id + 1) / (num_classes + 1)
        patch = raster[int(g.y1):int(g.y2), int(g.x1):int(g.x2)]
        patch += level + rng.normal(0.0, 10.0, size=patch.shape)
    raster = np.clip(np.rint(raster), 0, 255).astype(np.uint8)
    return raster, gt


class SyntheticDetector:
    """Detector-interface adapter around :func:`predict`.

    Ground truth is looked up by image id; composite (mixed) images get their
    truth from :meth:`register_composite`. Parameters are ignored: the
    oracle has nothing to train.
    """

    def __init__(self, scenes: dict, noise: NoiseModel):
        self.scenes = dict(scenes)
        self.noise = noise

    def ground_truth(self, image_id: str) -> list:
        try:
            return list(self.scenes[image_id])
        except KeyError:
            raise KeyError(f"no ground truth for image {image_id!r}") from None

    def predict(self, raster, params, seed, *, image_id: str,
                view: Optional[ViewTransform] = None) -> DetectionSet:
        if view is None:
            h, w = np.asarray(raster).shape[:2]
            view = identity_view(w, h)
        return predict(self.ground_truth(image_id), view, self.noise, int(seed), image_id)

    def register_composite(self, image_id: str, target_id: str,
                           pastes: Sequence[PasteRecord]) -> None:
        """Truth of a mixed image: the target's objects plus every pasted chip's
        true object (if the pasted pseudo-box was a true positive)."""
        truth = list(self.ground_truth(target_id))
        for rec in pastes:
            if not rec.accepted:
                continue
            src = self.ground_truth(rec.source_image_id)
            if not src:
                continue
            best = max(src, key=lambda g: iou(g, rec.source_box))
            if iou(best, rec.source_box) >= 0.5:
                truth.append(paste_map_box(rec, best))
        self.scenes[image_id] = truth
