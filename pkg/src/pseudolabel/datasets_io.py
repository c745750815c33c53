"""Annotation loading, semi-supervised splits and line-delimited record files.

Annotation files are a minimal COCO subset::

    {"images": [{"id": 1, "file_name": "a.png", "width": 640, "height": 480}],
     "annotations": [{"id": 7, "image_id": 1, "category_id": 2,
                      "bbox": [x, y, w, h]}],
     "categories": [{"id": 2, "name": "tyre"}]}

Category ids are remapped to contiguous indices ``0..C-1`` in sorted order.
Image ids are kept as strings throughout.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import BBox, clip_to_image
from .ompl import MixPlan, PasteRecord
from .reliability import DetectionSet, ScoredPseudoLabel, ViewEvidence

log = logging.getLogger(__name__)

SCORED_HEADER = {"format": "scored-pseudo-labels", "version": 1}


class DatasetError(ValueError):
    pass


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class ImageInfo:
    id: str
    file_name: str
    width: int
    height: int


@dataclass
class Dataset:
    images: list
    annotations: dict
    categories: dict
    image_root: Optional[Path] = None
    rejected_boxes: int = 0
    category_remap: dict = field(default_factory=dict)

    @property
    def ids(self) -> list:
        return [im.id for im in self.images]

    def image(self, image_id: str) -> ImageInfo:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def gt(self, image_id: str) -> list:
        return list(self.annotations.get(image_id, []))

    def image_path(self, image_id: str) -> Path:
        root = self.image_root or Path(".")
        return root / self.image(image_id).file_name


def load_dataset(annotation_path, image_root=None, check_files: bool = True) -> Dataset:
    """Parse and validate an annotation file.

    Boxes are converted from ``(x, y, w, h)`` to corners and clipped to the
    image. Boxes with nonpositive size are skipped and counted in
    ``rejected_boxes``.
    """
    annotation_path = Path(annotation_path)
    with open(annotation_path) as fh:
        doc = json.load(fh)
    root = Path(image_root) if image_root is not None else annotation_path.parent

    images, seen = [], set()
    for im in doc.get("images", []):
        iid = str(im["id"])
        if iid in seen:
            raise DatasetError(f"duplicate image id {iid}")
        seen.add(iid)
        images.append(ImageInfo(iid, str(im.get("file_name", f"{iid}.png")),
                                int(im["width"]), int(im["height"])))
    if check_files:
        missing = [im.id for im in images if not (root / im.file_name).exists()]
        if missing:
            raise DatasetError(f"missing image files for ids: {missing}")

    cat_ids = sorted(int(c["id"]) for c in doc.get("categories", []))
    if len(set(cat_ids)) != len(cat_ids):
        raise DatasetError("duplicate category ids")
    remap = {cid: k for k, cid in enumerate(cat_ids)}
    names = {int(c["id"]): str(c.get("name", c["id"])) for c in doc.get("categories", [])}
    categories = {remap[cid]: names[cid] for cid in cat_ids}

    by_id = {im.id: im for im in images}
    annotations: dict = {im.id: [] for im in images}
    ann_ids, rejected = set(), 0
    for ann in doc.get("annotations", []):
        if "id" in ann:
            if ann["id"] in ann_ids:
                raise DatasetError(f"duplicate annotation id {ann['id']}")
            ann_ids.add(ann["id"])
        iid = str(ann["image_id"])
        if iid not in by_id:
            raise DatasetError(f"annotation {ann.get('id')} references unknown image {iid}")
        cid = int(ann["category_id"])
        if cid not in remap:
            raise DatasetError(f"annotation {ann.get('id')} references unknown category {cid}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        if not (w > 0 and h > 0):
            rejected += 1
            continue
        info = by_id[iid]
        box = clip_to_image(BBox(x, y, x + w, y + h, class_id=remap[cid]),
                            info.width, info.height, min_area=0.0)
        if box is None:
            rejected += 1
            continue
        annotations[iid].append(box)
    if rejected:
        log.warning("rejected %d malformed boxes in %s", rejected, annotation_path)
    return Dataset(images, annotations, categories, root, rejected,
                   {v: k for k, v in remap.items()})


def dataset_from_scenes(scenes: dict, sizes: dict, num_classes: int) -> Dataset:
    """In-memory dataset, e.g. from synthetic scenes."""
    images = [ImageInfo(i, f"{i}.png", *sizes[i]) for i in scenes]
    cats = {k: f"class{k}" for k in range(num_classes)}
    return Dataset(images, {i: list(b) for i, b in scenes.items()}, cats)


@dataclass(frozen=True)
class SplitSpec:
    labeled_fraction: float
    seed: int = 0
    stratify_by_class: bool = False

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_split(ds: Dataset | Sequence[str], spec: SplitSpec) -> tuple[list, list]:
    """Uniform random image-level split into sorted labeled / unlabeled ids.

    With ``stratify_by_class`` images are grouped by their most frequent
    class and each group is sampled separately, topping up to the global
    target size.
    """
    ids = list(ds.ids if isinstance(ds, Dataset) else ds)
    n_lab = _round_half_up(spec.labeled_fraction * len(ids))
    rng = np.random.default_rng([spec.seed, 0x5B117])
    if spec.stratify_by_class and isinstance(ds, Dataset):
        groups: dict = {}
        for iid in ids:
            classes = [b.class_id for b in ds.gt(iid)]
            key = max(set(classes), key=classes.count) if classes else -1
            groups.setdefault(key, []).append(iid)
        chosen = []
        for key in sorted(groups):
            members = groups[key]
            k = _round_half_up(spec.labeled_fraction * len(members))
            perm = rng.permutation(len(members))
            chosen.extend(members[i] for i in perm[:k])
        chosen_set = set(chosen)
        rest = [i for i in ids if i not in chosen_set]
        perm = rng.permutation(len(rest))
        if len(chosen) < n_lab:
            chosen.extend(rest[i] for i in perm[:n_lab - len(chosen)])
        chosen = chosen[:n_lab]
    else:
        perm = rng.permutation(len(ids))
        chosen = [ids[i] for i in perm[:n_lab]]
    labeled = set(chosen)
    return sorted(labeled), sorted(i for i in ids if i not in labeled)


def write_ids(path, ids: Iterable[str]) -> None:
    with open(path, "w") as fh:
        for i in sorted(ids):
            fh.write(f"{i}\n")


def read_ids(path) -> list:
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# line-delimited records


def box_to_dict(b: BBox) -> dict:
    d = {"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2,
         "class_id": b.class_id, "score": b.score}
    if b.probs is not None:
        d["probs"] = list(b.probs)
    return d


def box_from_dict(d: dict) -> BBox:
    probs = d.get("probs")
    return BBox(float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"]),
                class_id=int(d.get("class_id", 0)), score=float(d.get("score", 1.0)),
                probs=tuple(probs) if probs is not None else None)


def detection_to_dict(ds: DetectionSet) -> dict:
    d = {"image_id": ds.image_id, "view": ds.view,
         "boxes": [box_to_dict(b) for b in ds.boxes]}
    if ds.width is not None:
        d["width"], d["height"] = ds.width, ds.height
    return d


def detection_from_dict(d: dict) -> DetectionSet:
    return DetectionSet(str(d["image_id"]), str(d["view"]),
                        tuple(box_from_dict(b) for b in d["boxes"]),
                        d.get("width"), d.get("height"))


def dumps(obj) -> str:
    # repr-based float formatting round-trips doubles exactly
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_detections(path, sets: Iterable[DetectionSet]) -> None:
    with open(path, "w") as fh:
        for ds in sets:
            fh.write(dumps(detection_to_dict(ds)) + "\n")


def _iter_json_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: malformed record: {exc.msg}") from None


def read_detections(path) -> list:
    out = []
    for lineno, rec in _iter_json_lines(path):
        try:
            out.append(detection_from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"{path}:{lineno}: malformed record: {exc}") from None
    return out


def evidence_to_dict(ev: ViewEvidence) -> dict:
    return {"view": ev.view, "matched": box_to_dict(ev.matched) if ev.matched else None,
            "iou": ev.iou, "score_gap": ev.score_gap, "beta": ev.beta}


def evidence_from_dict(d: dict) -> ViewEvidence:
    m = d.get("matched")
    return ViewEvidence(d["view"], box_from_dict(m) if m else None, float(d["iou"]),
                        float(d["score_gap"]), int(d["beta"]))


def label_to_dict(lab: ScoredPseudoLabel) -> dict:
    return {"label_id": lab.label_id, "image_id": lab.image_id,
            "box": box_to_dict(lab.box), "reliability": lab.reliability,
            "evidence": [evidence_to_dict(e) for e in lab.evidence]}


def label_from_dict(d: dict) -> ScoredPseudoLabel:
    return ScoredPseudoLabel(d["label_id"], str(d["image_id"]), box_from_dict(d["box"]),
                             float(d["reliability"]),
                             tuple(evidence_from_dict(e) for e in d.get("evidence", [])))


def write_scored(path, labels: Iterable[ScoredPseudoLabel], meta: Optional[dict] = None) -> None:
    """Scored pseudo-labels: one header line, then one label per line."""
    header = dict(SCORED_HEADER, **(meta or {}))
    with open(path, "w") as fh:
        fh.write(dumps(header) + "\n")
        for lab in labels:
            fh.write(dumps(label_to_dict(lab)) + "\n")


def read_scored(path) -> tuple[dict, list]:
    header, labels = None, []
    for lineno, rec in _iter_json_lines(path):
        if header is None:
            if rec.get("format") != SCORED_HEADER["format"]:
                raise RecordError(f"{path}:{lineno}: missing scored-label header")
            header = rec
            continue
        try:
            labels.append(label_from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"{path}:{lineno}: malformed label: {exc}") from None
    if header is None:
        raise RecordError(f"{path}: empty file, missing header")
    return header, labels


def paste_to_dict(p: PasteRecord) -> dict:
    return {"source_image_id": p.source_image_id, "source_label_id": p.source_label_id,
            "source_box": box_to_dict(p.source_box), "rotation": p.rotation,
            "scale": p.scale, "offset": list(p.offset),
            "dest_box": box_to_dict(p.dest_box) if p.dest_box else None,
            "accepted": p.accepted, "reason": p.reason, "attempts": p.attempts}


def paste_from_dict(d: dict) -> PasteRecord:
    dest = d.get("dest_box")
    return PasteRecord(d["source_image_id"], d["source_label_id"],
                       box_from_dict(d["source_box"]), float(d["rotation"]),
                       float(d["scale"]), tuple(int(v) for v in d["offset"]),
                       box_from_dict(dest) if dest else None, bool(d["accepted"]),
                       d.get("reason", ""), int(d.get("attempts", 0)))


def plan_to_dict(plan: MixPlan) -> dict:
    return {"target_image_id": plan.target_image_id,
            "gating_boxes": [box_to_dict(b) for b in plan.gating_boxes],
            "pastes": [paste_to_dict(p) for p in plan.pastes]}


def plan_from_dict(d: dict) -> MixPlan:
    return MixPlan(d["target_image_id"], [paste_from_dict(p) for p in d["pastes"]],
                   [box_from_dict(b) for b in d.get("gating_boxes", [])])


def read_raster(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def write_png(path, raster: np.ndarray) -> None:
    arr = np.asarray(raster)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0 if arr.max() <= 1.0 else arr), 0, 255).astype(np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)
