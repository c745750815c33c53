"""Loss values for the teacher-student objective.

The unsupervised part combines a reliability-weighted classification +
regression loss over matched student/pseudo-label pairs with a corner-point
regression loss on the pairs whose reliability clears the threshold. Both
are value computations; only the corner loss also returns its gradient with
respect to the student corners.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BBox, corners, iou
from .reliability import DetectionSet, ScoredPseudoLabel

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class MatchedPair:
    student: BBox
    teacher: BBox
    reliability: float
    match_iou: float
    student_index: int = -1
    teacher_label_id: str = ""


@dataclass
class LossReport:
    L_sup: float = 0.0
    L_PLRW: float = 0.0
    L_CPRL: float = 0.0
    L_unsup: float = 0.0
    L_total: float = 0.0
    lambda_u: float = 1.0
    n_sup: int = 0
    n_plrw: int = 0
    n_cprl: int = 0
    pairs: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {"L_sup": self.L_sup, "L_PLRW": self.L_PLRW, "L_CPRL": self.L_CPRL,
                "L_unsup": self.L_unsup, "L_total": self.L_total,
                "lambda_u": self.lambda_u, "n_sup": self.n_sup,
                "n_plrw": self.n_plrw, "n_cprl": self.n_cprl}


def assign(student: DetectionSet | Sequence[BBox], pseudo: Sequence[ScoredPseudoLabel],
           assign_min_iou: float = 0.5) -> list[MatchedPair]:
    """Greedy one-to-one student/pseudo-label matching by descending IoU.

    Ties are broken by higher student confidence, then lower student index,
    then lower pseudo-label index. Pairs below ``assign_min_iou`` are dropped.
    """
    boxes = student.boxes if isinstance(student, DetectionSet) else tuple(student)
    cands = []
    for i, s in enumerate(boxes):
        for j, lab in enumerate(pseudo):
            v = iou(s, lab.box)
            if v >= assign_min_iou and v > 0.0:
                cands.append((-v, -s.score, i, j))
    cands.sort()
    used_s, used_t, pairs = set(), set(), []
    for neg_v, _, i, j in cands:
        if i in used_s or j in used_t:
            continue
        used_s.add(i)
        used_t.add(j)
        lab = pseudo[j]
        pairs.append(MatchedPair(boxes[i], lab.box, lab.reliability, -neg_v, i, lab.label_id))
    return pairs


def cls_loss(pair: MatchedPair) -> float:
    """Cross-entropy of the student's probabilities on the pseudo-label class."""
    probs = pair.student.probs
    if probs is None:
        raise ValueError("student box carries no class probabilities")
    k = pair.teacher.class_id
    p = probs[k] if 0 <= k < len(probs) else 0.0
    return -math.log(max(p, PROB_FLOOR))


def _smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def box_deltas(student: BBox, teacher: BBox) -> tuple[float, float, float, float]:
    (scx, scy), (tcx, tcy) = student.center, teacher.center
    return ((scx - tcx) / teacher.width, (scy - tcy) / teacher.height,
            math.log(student.width / teacher.width),
            math.log(student.height / teacher.height))


def reg_loss(pair: MatchedPair) -> float:
    """Smooth-L1 over the standard (dx, dy, dlogw, dlogh) box deltas."""
    return math.fsum(_smooth_l1(d) for d in box_deltas(pair.student, pair.teacher))


def plrw_loss(pairs: Sequence[MatchedPair]) -> float:
    """Mean over pairs of reliability * (cls + reg)."""
    if not pairs:
        return 0.0
    return math.fsum(p.reliability * (cls_loss(p) + reg_loss(p)) for p in pairs) / len(pairs)


def corner_term(teacher_corners: np.ndarray, student_corners: np.ndarray):
    """Squared corner distance over the squared enclosing-rectangle diagonal.

    The enclosing rectangle spans all eight corner points. Returns the value
    and its gradient (4x2) with respect to the student corners. Where an
    extremum is attained by several coordinates the derivative is assigned
    to the first student coordinate attaining it, or dropped if only teacher
    coordinates attain it; the function is smooth wherever each extremum is
    unique.
    """
    ct = np.asarray(teacher_corners, dtype=np.float64)
    cs = np.asarray(student_corners, dtype=np.float64)
    diff = cs - ct
    num = float(np.sum(diff * diff))
    pts = np.vstack([ct, cs])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    l2 = float(extent[0] ** 2 + extent[1] ** 2)
    grad = np.zeros((4, 2))
    if l2 == 0.0:
        return 0.0, grad
    grad += 2.0 * diff / l2
    # d(num / l2) / d(l2) * d(l2) / d(extremum)
    scale = num / (l2 * l2)
    for axis in (0, 1):
        col = cs[:, axis]
        hits_hi = np.nonzero(col == hi[axis])[0]
        hits_lo = np.nonzero(col == lo[axis])[0]
        if hits_hi.size:
            grad[hits_hi[0], axis] -= scale * 2.0 * extent[axis]
        if hits_lo.size:
            grad[hits_lo[0], axis] += scale * 2.0 * extent[axis]
    return num / l2, grad


def cprl_pair(pair: MatchedPair):
    return corner_term(corners(pair.teacher), corners(pair.student))


def cprl_loss(pairs: Sequence[MatchedPair], gamma_hat: float = 0.5):
    """Corner-point regression loss over pairs with reliability above ``gamma_hat``.

    Returns ``(value, grads)`` where ``grads[k]`` is the 4x2 gradient for the
    k-th pair (zero for pairs that did not qualify).
    """
    qualifying = [k for k, p in enumerate(pairs) if p.reliability > gamma_hat]
    grads = [np.zeros((4, 2)) for _ in pairs]
    if not qualifying:
        return 0.0, grads
    n = len(qualifying)
    values = []
    for k in qualifying:
        v, g = cprl_pair(pairs[k])
        values.append(v)
        grads[k] = g / n
    return math.fsum(values) / n, grads


def supervised_loss(preds: DetectionSet | Sequence[BBox], gt: Sequence[BBox],
                    assign_min_iou: float = 0.5) -> tuple[float, int]:
    """Unweighted cls + reg loss averaged over matched prediction/gt pairs.

    Returns the loss and the number of pairs.
    """
    labels = [ScoredPseudoLabel(f"gt/{i}", "", b, 1.0) for i, b in enumerate(gt)]
    pairs = assign(preds, labels, assign_min_iou)
    if not pairs:
        return 0.0, 0
    return math.fsum(cls_loss(p) + reg_loss(p) for p in pairs) / len(pairs), len(pairs)


def total_loss(L_sup: float, L_PLRW: float, L_CPRL: float, lambda_u: float = 1.0,
               **counts) -> LossReport:
    if lambda_u < 0:
        raise ValueError("lambda_u must be nonnegative")
    L_unsup = L_PLRW + L_CPRL
    return LossReport(L_sup, L_PLRW, L_CPRL, L_unsup, L_sup + lambda_u * L_unsup,
                      lambda_u, **counts)


def unsupervised_report(pairs: Sequence[MatchedPair], gamma_hat: float,
                        L_sup: float = 0.0, n_sup: int = 0,
                        lambda_u: float = 1.0) -> LossReport:
    """Full report for already-assigned pairs."""
    plrw = plrw_loss(pairs)
    cprl, _ = cprl_loss(pairs, gamma_hat)
    n_cprl = sum(1 for p in pairs if p.reliability > gamma_hat)
    report = total_loss(L_sup, plrw, cprl, lambda_u, n_sup=n_sup,
                        n_plrw=len(pairs), n_cprl=n_cprl)
    report.pairs = [
        {"teacher_label_id": p.teacher_label_id, "student_index": p.student_index,
         "match_iou": p.match_iou, "reliability": p.reliability,
         "l_cls": cls_loss(p), "l_reg": reg_loss(p)}
        for p in pairs
    ]
    return report
