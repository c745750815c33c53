"""One teacher-student iteration over a pluggable detector.

Order of operations: teacher predicts on each unlabeled image and its
augmented views -> reliability scoring -> threshold filter -> object mixing
into the batch's first image -> student predicts on strong-augmented inputs
-> student/pseudo-label assignment -> losses -> EMA teacher update.

The engine only computes loss values; updating student parameters is left to
the caller. Detectors implement::

    predict(raster, params, seed, *, image_id, view) -> DetectionSet

returning boxes in ``view``'s frame. A detector may also provide
``register_composite(image_id, target_id, pastes)`` to learn about mixed
images (the synthetic oracle uses this to know their ground truth).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from . import datasets_io as dio
from .losses import (LossReport, MatchedPair, assign, cls_loss, reg_loss,
                     unsupervised_report)
from .ompl import BatchItem, MixConfig, MixPlan, mix_batch
from .reliability import (DetectionSet, ReliabilityConfig, ScoredPseudoLabel, assess,
                          filter_reliable)
from .views import (AugmentationPolicy, AugmentDraw, ViewTransform, apply_draw,
                    forward_box, forward_raster, identity_view, sample_strong, sample_weak)

ROLE_TEACHER, ROLE_STUDENT, ROLE_STRONG, ROLE_WEAK, ROLE_SUP = 1, 2, 3, 4, 5


class DetectorError(RuntimeError):
    pass


class Detector(Protocol):
    def predict(self, raster, params, seed, *, image_id: str,
                view: ViewTransform) -> DetectionSet: ...


def subseed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for a named substream of ``seed``."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def ema_update(teacher, student, m: float) -> np.ndarray:
    """theta_t <- m * theta_t + (1 - m) * theta_s, elementwise."""
    t = np.asarray(teacher, dtype=np.float64)
    s = np.asarray(student, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"parameter length mismatch: {t.shape} vs {s.shape}")
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    if m == 1.0:
        return t.copy()
    if m == 0.0:
        return s.copy()
    out = m * t + (1.0 - m) * s
    # keep every element inside [min(t, s), max(t, s)] despite rounding
    return np.clip(out, np.minimum(t, s), np.maximum(t, s))


@dataclass(frozen=True)
class EngineConfig:
    reliability: ReliabilityConfig = ReliabilityConfig()
    mix: MixConfig = MixConfig()
    augment: AugmentationPolicy = AugmentationPolicy()
    lambda_u: float = 1.0
    assign_min_iou: float = 0.5
    ema_momentum: float = 0.999
    interpolation: str = "bilinear"


@dataclass
class StudentInput:
    image_id: str
    source_image_id: str
    draw: AugmentDraw
    labels: list
    detections: DetectionSet


@dataclass
class SupervisedInput:
    image_id: str
    draw: AugmentDraw
    gt: list
    detections: DetectionSet


@dataclass
class IterationTrace:
    iteration: int
    seed: int
    labeled_ids: list
    unlabeled_ids: list
    momentum: float
    teacher_detections: list = field(default_factory=list)
    scored: list = field(default_factory=list)
    reliable_ids: list = field(default_factory=list)
    mix_plan: Optional[MixPlan] = None
    student: list = field(default_factory=list)
    supervised: list = field(default_factory=list)
    losses: Optional[LossReport] = None
    teacher_params: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return trace_to_dict(self)

    def dumps(self) -> str:
        return dio.dumps(self.to_dict())


def _call(detector, raster, params, seed, image_id, view) -> DetectionSet:
    try:
        dets = detector.predict(raster, params, seed, image_id=image_id, view=view)
    except Exception as exc:
        raise DetectorError(f"detector failed on image {image_id!r} "
                            f"(view {view.name}): {exc}") from exc
    return dets


def _map_labels(labels, t: ViewTransform, image_id: str) -> list:
    return [ScoredPseudoLabel(lab.label_id, image_id, forward_box(t, lab.box),
                              lab.reliability, lab.evidence) for lab in labels]


def teacher_pass(detector, image_id: str, raster, params, seed: int,
                 cfg: EngineConfig) -> tuple[list, list]:
    """Teacher detections on the original image and each augmented view, and
    the reliability-scored pseudo-labels derived from them."""
    h, w = np.asarray(raster).shape[:2]
    orig = _call(detector, raster, params, seed, image_id, identity_view(w, h))
    transforms, aug = [], []
    for spec in cfg.reliability.views:
        t = spec.bind(w, h, cfg.interpolation)
        transforms.append(t)
        aug.append(_call(detector, forward_raster(t, raster), params, seed, image_id, t))
    return [orig, *aug], assess(orig, aug, transforms, cfg.reliability)


def run_iteration(labeled: Sequence, unlabeled: Sequence, detector, cfg: EngineConfig,
                  seed: int, teacher_params, student_params, iteration: int = 0,
                  batch_id: int = 0) -> IterationTrace:
    """Run the full pipeline on one labeled and one unlabeled batch.

    ``labeled`` items are ``(image_id, raster, gt_boxes)``; ``unlabeled``
    items are ``(image_id, raster)``.
    """
    if len(unlabeled) < 1:
        raise ValueError("unlabeled batch must hold at least one image")
    trace = IterationTrace(iteration, seed, [str(it[0]) for it in labeled],
                           [str(it[0]) for it in unlabeled], cfg.ema_momentum)
    rcfg = cfg.reliability

    # teacher, weak path: original plus every augmented view
    items = []
    for idx, (image_id, raster) in enumerate(unlabeled):
        dets, scored = teacher_pass(detector, image_id, raster, teacher_params,
                                    subseed(seed, ROLE_TEACHER, idx), cfg)
        trace.teacher_detections.extend(dets)
        trace.scored.extend(scored)
        items.append(BatchItem(image_id, raster, scored))

    reliable = [filter_reliable(it.labels, rcfg.gamma_hat) for it in items]
    trace.reliable_ids = [lab.label_id for labs in reliable for lab in labs]

    target = iteration % len(items) if cfg.mix.rotate_role else 0
    # one threshold governs both filtering and paste candidacy
    mcfg = dataclasses.replace(cfg.mix, gamma_hat=rcfg.gamma_hat)
    mixed, plan = mix_batch(items, mcfg, batch_id=batch_id, target_index=target)
    trace.mix_plan = plan
    mixed_id = f"{mixed.image_id}#mixed"
    hook = getattr(detector, "register_composite", None)
    if hook is not None:
        hook(mixed_id, mixed.image_id, plan.pastes)

    student_sources = [(mixed_id, mixed.image_id, mixed.raster, mixed.labels)]
    for k, it in enumerate(items):
        if k != target:
            student_sources.append((it.image_id, it.image_id, it.raster, reliable[k]))

    # student, strong path
    pairs: list[MatchedPair] = []
    for idx, (sid, src, raster, labels) in enumerate(student_sources):
        h, w = np.asarray(raster).shape[:2]
        draw = sample_strong(cfg.augment, subseed(seed, ROLE_STRONG, idx))
        t = draw.transform(w, h)
        mapped = _map_labels(labels, t, sid)
        dets = _call(detector, apply_draw(draw, raster), student_params,
                     subseed(seed, ROLE_STUDENT, idx), sid, t)
        trace.student.append(StudentInput(sid, src, draw, mapped, dets))
        pairs.extend(assign(dets, mapped, cfg.assign_min_iou))

    # supervised branch, weak augmentation
    sup_pairs: list[MatchedPair] = []
    for idx, (image_id, raster, gt) in enumerate(labeled):
        h, w = np.asarray(raster).shape[:2]
        draw = sample_weak(cfg.augment, subseed(seed, ROLE_WEAK, idx))
        t = draw.transform(w, h)
        gt_t = [forward_box(t, g) for g in gt]
        dets = _call(detector, apply_draw(draw, raster), student_params,
                     subseed(seed, ROLE_SUP, idx), image_id, t)
        trace.supervised.append(SupervisedInput(image_id, draw, gt_t, dets))
        sup_pairs.extend(_supervised_pairs(dets, gt_t, cfg.assign_min_iou))

    trace.losses = _report(pairs, sup_pairs, cfg)
    trace.teacher_params = ema_update(teacher_params, student_params, cfg.ema_momentum)
    return trace


def _supervised_pairs(dets, gt, assign_min_iou) -> list:
    labels = [ScoredPseudoLabel(f"gt/{i}", "", b, 1.0) for i, b in enumerate(gt)]
    return assign(dets, labels, assign_min_iou)


def _report(pairs, sup_pairs, cfg: EngineConfig) -> LossReport:
    L_sup = (math.fsum(cls_loss(p) + reg_loss(p) for p in sup_pairs) / len(sup_pairs)
             if sup_pairs else 0.0)
    return unsupervised_report(pairs, cfg.reliability.gamma_hat, L_sup, len(sup_pairs),
                               cfg.lambda_u)


def losses_from_trace(trace: IterationTrace, cfg: EngineConfig) -> LossReport:
    """Recompute the loss report from the detections recorded in a trace."""
    pairs, sup_pairs = [], []
    for st in trace.student:
        pairs.extend(assign(st.detections, st.labels, cfg.assign_min_iou))
    for sp in trace.supervised:
        sup_pairs.extend(_supervised_pairs(sp.detections, sp.gt, cfg.assign_min_iou))
    return _report(pairs, sup_pairs, cfg)


# ---------------------------------------------------------------------------
# serialization


def report_to_dict(r: LossReport) -> dict:
    return dict(r.as_row(), pairs=r.pairs)


def report_from_dict(d: dict) -> LossReport:
    fields = {k: d[k] for k in ("L_sup", "L_PLRW", "L_CPRL", "L_unsup", "L_total",
                                "lambda_u", "n_sup", "n_plrw", "n_cprl")}
    return LossReport(**fields, pairs=list(d.get("pairs", [])))


def _draw_dict(d: AugmentDraw) -> dict:
    return {"flip": d.flip, "blur_sigma": d.blur_sigma}


def trace_to_dict(tr: IterationTrace) -> dict:
    return {
        "iteration": tr.iteration, "seed": tr.seed,
        "labeled_ids": tr.labeled_ids, "unlabeled_ids": tr.unlabeled_ids,
        "momentum": tr.momentum,
        "teacher_detections": [dio.detection_to_dict(d) for d in tr.teacher_detections],
        "scored": [dio.label_to_dict(lab) for lab in tr.scored],
        "reliable_ids": tr.reliable_ids,
        "mix_plan": dio.plan_to_dict(tr.mix_plan) if tr.mix_plan else None,
        "student": [{"image_id": s.image_id, "source_image_id": s.source_image_id,
                     "augment": _draw_dict(s.draw),
                     "labels": [dio.label_to_dict(lab) for lab in s.labels],
                     "detections": dio.detection_to_dict(s.detections)}
                    for s in tr.student],
        "supervised": [{"image_id": s.image_id, "augment": _draw_dict(s.draw),
                        "gt": [dio.box_to_dict(b) for b in s.gt],
                        "detections": dio.detection_to_dict(s.detections)}
                       for s in tr.supervised],
        "losses": report_to_dict(tr.losses) if tr.losses else None,
        "teacher_params": (tr.teacher_params.tolist()
                           if tr.teacher_params is not None else None),
    }


def trace_from_dict(d: dict) -> IterationTrace:
    tr = IterationTrace(d["iteration"], d["seed"], d["labeled_ids"], d["unlabeled_ids"],
                        d["momentum"])
    tr.teacher_detections = [dio.detection_from_dict(x) for x in d["teacher_detections"]]
    tr.scored = [dio.label_from_dict(x) for x in d["scored"]]
    tr.reliable_ids = list(d["reliable_ids"])
    tr.mix_plan = dio.plan_from_dict(d["mix_plan"]) if d.get("mix_plan") else None
    tr.student = [StudentInput(s["image_id"], s["source_image_id"], AugmentDraw(**s["augment"]),
                               [dio.label_from_dict(x) for x in s["labels"]],
                               dio.detection_from_dict(s["detections"]))
                  for s in d["student"]]
    tr.supervised = [SupervisedInput(s["image_id"], AugmentDraw(**s["augment"]),
                                     [dio.box_from_dict(b) for b in s["gt"]],
                                     dio.detection_from_dict(s["detections"]))
                     for s in d["supervised"]]
    tr.losses = report_from_dict(d["losses"]) if d.get("losses") else None
    if d.get("teacher_params") is not None:
        tr.teacher_params = np.asarray(d["teacher_params"], dtype=np.float64)
    return tr


class SubprocessDetector:
    """Out-of-process detector speaking line-delimited JSON over stdin/stdout.

    Each request is one line::

        {"image_id": ..., "view": ..., "scale_factor": ..., "width": ...,
         "height": ..., "seed": ..., "raster_path": "...png", "params": [...]}

    and the reply is one detection record line (see ``datasets_io``).
    """

    def __init__(self, command: Sequence[str], workdir: Optional[str] = None):
        self._tmp = tempfile.TemporaryDirectory(dir=workdir)
        self._n = 0
        self.proc = subprocess.Popen(list(command), stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE, text=True, bufsize=1)

    def predict(self, raster, params, seed, *, image_id: str,
                view: ViewTransform) -> DetectionSet:
        path = os.path.join(self._tmp.name, f"r{self._n}.png")
        self._n += 1
        dio.write_png(path, raster)
        req = {"image_id": image_id, "view": view.name, "scale_factor": view.scale_factor,
               "width": view.image_width, "height": view.image_height, "seed": int(seed),
               "raster_path": path,
               "params": [float(p) for p in np.asarray(params, dtype=np.float64).ravel()]}
        self.proc.stdin.write(json.dumps(req) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise DetectorError(f"detector process exited (code {self.proc.poll()})")
        return dio.detection_from_dict(json.loads(line))

    def close(self) -> None:
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.wait(timeout=10)
        self._tmp.cleanup()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
