"""Detection / pseudo-label quality against ground truth.

Matching is greedy in descending confidence per class: each prediction takes
the highest-IoU still-unmatched ground-truth box of its class in its image,
if that IoU reaches the threshold. AP uses all-points interpolation of the
precision-recall curve and is accumulated in exact rational arithmetic, so
it is reproducible bit-for-bit regardless of summation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .geometry import BBox, iou
from .reliability import DetectionSet, ScoredPseudoLabel, filter_reliable

EMPTY_PRECISION = 1.0


@dataclass
class EvalReport:
    iou_thresh: float
    ap: dict = field(default_factory=dict)
    mAP: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = EMPTY_PRECISION
    recall: float = 0.0
    pr_curve: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"iou_thresh": self.iou_thresh,
                "ap": {str(k): v for k, v in sorted(self.ap.items())},
                "mAP": self.mAP, "tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall,
                "pr_curve": self.pr_curve}


def _gt_lookup(gt) -> Mapping[str, Sequence[BBox]]:
    if hasattr(gt, "annotations") and hasattr(gt, "ids"):
        return {i: gt.gt(i) for i in gt.ids}
    return gt


def match_predictions(preds, gt: Mapping[str, Sequence[BBox]], iou_thresh: float):
    """Greedy matching of ``(image_id, box)`` predictions.

    Returns ``(order, flags)``: prediction indices in ranking order (score
    descending, stable) and, per ranked prediction, whether it is a TP.
    """
    order = sorted(range(len(preds)), key=lambda k: (-preds[k][1].score, k))
    used: dict = {}
    flags = []
    for k in order:
        image_id, box = preds[k]
        best, best_iou = None, -1.0
        for gi, g in enumerate(gt.get(image_id, ())):
            if g.class_id != box.class_id or (image_id, gi) in used:
                continue
            v = iou(box, g)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = gi, v
        if best is not None:
            used[(image_id, best)] = True
        flags.append(best is not None)
    return order, flags


def average_precision(flags: Sequence[bool], n_gt: int) -> Fraction:
    """All-points interpolated AP of a ranked TP/FP sequence."""
    if n_gt == 0:
        return Fraction(0)
    precisions, tp = [], 0
    for k, hit in enumerate(flags, start=1):
        tp += hit
        precisions.append(Fraction(tp, k))
    # precision envelope: best precision at any deeper cut
    total, best = Fraction(0), Fraction(0)
    for p, hit in zip(reversed(precisions), reversed(flags)):
        best = max(best, p)
        if hit:
            total += best
    return total / n_gt


def evaluate(preds: Sequence[DetectionSet], gt, iou_thresh: float = 0.5) -> EvalReport:
    gt = _gt_lookup(gt)
    flat = [(ds.image_id, b) for ds in preds for b in ds.boxes]
    report = EvalReport(iou_thresh)
    gt_classes = sorted({g.class_id for boxes in gt.values() for g in boxes})
    pred_classes = sorted({b.class_id for _, b in flat})
    all_flags = []
    ap_exact = {}
    for c in sorted(set(gt_classes) | set(pred_classes)):
        cls_preds = [p for p in flat if p[1].class_id == c]
        n_gt = sum(1 for boxes in gt.values() for g in boxes if g.class_id == c)
        order, flags = match_predictions(cls_preds, gt, iou_thresh)
        all_flags.extend((cls_preds[k][1].score, hit) for k, hit in zip(order, flags))
        tp = sum(flags)
        report.tp += tp
        report.fp += len(flags) - tp
        report.fn += n_gt - tp
        if n_gt:
            ap_exact[c] = average_precision(flags, n_gt)
            report.ap[c] = float(ap_exact[c])
    if gt_classes:
        report.mAP = float(sum(ap_exact.values()) / len(gt_classes))
    n_pred = report.tp + report.fp
    n_gt_total = report.tp + report.fn
    report.precision = report.tp / n_pred if n_pred else EMPTY_PRECISION
    report.recall = report.tp / n_gt_total if n_gt_total else 0.0

    # pooled precision/recall at each distinct confidence cut
    all_flags.sort(key=lambda t: -t[0])
    tp = fp = 0
    for k, (score, hit) in enumerate(all_flags):
        tp += hit
        fp += not hit
        if k + 1 == len(all_flags) or all_flags[k + 1][0] != score:
            report.pr_curve.append({"confidence": score, "precision": tp / (tp + fp),
                                    "recall": tp / n_gt_total if n_gt_total else 0.0})
    return report


def labels_as_detections(labels: Sequence[ScoredPseudoLabel]) -> list[DetectionSet]:
    by_image: dict = {}
    for lab in labels:
        by_image.setdefault(lab.image_id, []).append(lab.box)
    return [DetectionSet(i, "identity", tuple(b)) for i, b in sorted(by_image.items())]


def reliability_sweep(labels: Sequence[ScoredPseudoLabel], gt, thresholds: Sequence[float],
                      iou_thresh: float = 0.5) -> list[dict]:
    """Precision/recall of the pseudo-label set surviving each threshold.

    An empty surviving set reports precision 1 and recall 0.
    """
    gt = _gt_lookup(gt)
    rows = []
    for g in thresholds:
        kept = filter_reliable(labels, g)
        rep = evaluate(labels_as_detections(kept), gt, iou_thresh)
        rows.append({"gamma_hat": float(g), "n_kept": len(kept), "tp": rep.tp,
                     "fp": rep.fp, "fn": rep.fn, "precision": rep.precision,
                     "recall": rep.recall})
    return rows
