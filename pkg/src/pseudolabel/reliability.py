"""Multi-view reliability scoring of teacher pseudo-labels.

Each box the teacher predicts on the original image is matched, per augmented
view, to the view's detection with the highest IoU (after mapping that view's
detections back to the original frame). Agreement in location, confidence
and class across views is averaged and squashed:

    R = sigmoid( (1/H) * mean_a[ IoU*_a * (1 - |s_o - s_a|) * beta_a ] )

so R lies in [0.5, sigmoid(1/H)].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .geometry import BBox, iou
from .views import ViewSpec, ViewTransform, inverse_box


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionSet:
    """All boxes one detector emits for one image in one view.

    ``width``/``height`` are the dimensions of the *original* image frame,
    needed to undo mirror and scale views.
    """

    image_id: str
    view: str
    boxes: tuple = ()
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class ViewEvidence:
    view: str
    matched: Optional[BBox]
    iou: float
    score_gap: float
    beta: int

    @property
    def term(self) -> float:
        if self.matched is None:
            return 0.0
        return self.iou * (1.0 - self.score_gap) * self.beta


@dataclass(frozen=True)
class ScoredPseudoLabel:
    label_id: str
    image_id: str
    box: BBox
    reliability: float
    evidence: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "evidence", tuple(self.evidence))


@dataclass(frozen=True)
class ReliabilityConfig:
    H: float = 0.6
    gamma_hat: float = 0.5
    views: tuple = field(default=(ViewSpec("mirror"), ViewSpec("scale", 0.75)))
    match_min_iou: float = 0.0

    def __post_init__(self):
        if not self.H > 0:
            raise ConfigError(f"H must be positive, got {self.H}")
        if not 0.0 <= self.gamma_hat < 1.0:
            raise ConfigError(f"gamma_hat must lie in [0, 1), got {self.gamma_hat}")
        object.__setattr__(self, "views", tuple(self.views))
        if not self.views:
            raise ConfigError("at least one augmented view is required")

    @property
    def r_max(self) -> float:
        return sigmoid(1.0 / self.H)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def best_match(target: BBox, candidates: Sequence[BBox],
               match_min_iou: float = 0.0) -> tuple[Optional[BBox], float]:
    """Candidate with the highest IoU against ``target``.

    Ties go to the higher confidence, then the lower index. Returns
    ``(None, 0.0)`` when nothing overlaps by more than ``match_min_iou``.
    """
    best, best_key = None, None
    for idx, cand in enumerate(candidates):
        key = (iou(target, cand), cand.score, -idx)
        if best_key is None or key > best_key:
            best, best_key = cand, key
    if best is None or best_key[0] <= match_min_iou:
        return None, 0.0
    return best, best_key[0]


def beta(c_o: int, c_a: int) -> int:
    """Class-consistency flag."""
    return 1 if c_o == c_a else 0


def view_evidence(original: BBox, view: str, matched: Optional[BBox],
                  match_iou: float) -> ViewEvidence:
    if matched is None:
        return ViewEvidence(view, None, 0.0, 0.0, 0)
    return ViewEvidence(view, matched, match_iou, abs(original.score - matched.score),
                        beta(original.class_id, matched.class_id))


def reliability_score(original: BBox, per_view_matches, cfg: ReliabilityConfig) -> float:
    """Reliability of one pseudo-box from its per-view ``(box, IoU*)`` matches.

    Views without a match contribute 0 to the sum.
    """
    if not cfg.H > 0:
        raise ConfigError("H must be positive")
    matches = list(per_view_matches)
    if len(matches) != len(cfg.views):
        raise ValueError(f"expected {len(cfg.views)} view matches, got {len(matches)}")
    # fsum is exactly rounded, so the result does not depend on view order
    total = math.fsum(view_evidence(original, "", m, v).term for m, v in matches)
    return sigmoid(total / len(matches) / cfg.H)


def assess(original: DetectionSet, augmented: Sequence[DetectionSet],
           transforms: Sequence[ViewTransform],
           cfg: ReliabilityConfig = ReliabilityConfig()) -> list[ScoredPseudoLabel]:
    """Score every original-view box against the augmented views."""
    if len(augmented) != len(cfg.views) or len(transforms) != len(cfg.views):
        raise ValueError(
            f"{original.image_id}: expected {len(cfg.views)} augmented views, "
            f"got {len(augmented)} detection sets and {len(transforms)} transforms"
        )
    mapped = []
    for dets, t in zip(augmented, transforms):
        if dets.view != t.name:
            raise ValueError(f"{original.image_id}: detections for view {dets.view!r} "
                             f"paired with transform {t.name!r}")
        mapped.append((t.name, [inverse_box(t, b) for b in dets.boxes]))

    labels = []
    for j, box in enumerate(original.boxes):
        evidence = []
        for name, cands in mapped:
            matched, match_iou = best_match(box, cands, cfg.match_min_iou)
            evidence.append(view_evidence(box, name, matched, match_iou))
        total = math.fsum(ev.term for ev in evidence)
        r = sigmoid(total / len(mapped) / cfg.H)
        labels.append(ScoredPseudoLabel(f"{original.image_id}/{j}", original.image_id,
                                        box, r, tuple(evidence)))
    return labels


def filter_reliable(labels: Sequence[ScoredPseudoLabel], gamma_hat: float) -> list:
    """Keep labels with reliability strictly above ``gamma_hat``, in order."""
    return [lab for lab in labels if lab.reliability > gamma_hat]
