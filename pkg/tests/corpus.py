"""Seeded synthetic corpora shared by several test modules."""

import numpy as np
from scipy.stats import spearmanr

from pseudolabel.geometry import iou
from pseudolabel.ompl import BatchItem
from pseudolabel.synthetic import NoiseModel, SyntheticDetector, make_scene
from pseudolabel.teacher_student import EngineConfig, subseed, teacher_pass

NOISY = NoiseModel(jitter_sigma=2.0, class_flip_prob=0.1, false_positive_rate=1.0,
                   base_confidence=0.9, confidence_sigma=0.05, correlated=False)


def scenes(n, seed=0, size=128, num_classes=4):
    out = {}
    for i in range(n):
        raster, gt = make_scene(subseed(seed, 1, i), size, size, num_classes)
        out[f"s{seed}_{i:04d}"] = (raster, gt)
    return out


def scored_corpus(n, noise=NOISY, seed=0, cfg=EngineConfig()):
    """Teacher-scored pseudo-labels for ``n`` scenes, plus the ground truth."""
    sc = scenes(n, seed, num_classes=noise.num_classes)
    det = SyntheticDetector({k: gt for k, (_, gt) in sc.items()}, noise)
    labels, gt = [], {}
    for idx, (image_id, (raster, boxes)) in enumerate(sc.items()):
        _, scored = teacher_pass(det, image_id, raster, None, subseed(seed, 2, idx), cfg)
        labels.extend(scored)
        gt[image_id] = boxes
    return labels, gt, sc


def true_match(box, gt):
    """(best IoU to any gt box, whether it is a class-correct hit at 0.5)."""
    if not gt:
        return 0.0, False
    best = max(gt, key=lambda g: iou(g, box))
    v = iou(best, box)
    return v, v >= 0.5 and best.class_id == box.class_id


def mix_batch_items(seed, k=4, noise=NOISY):
    labels, _, sc = scored_corpus(k, noise, seed)
    by_image = {}
    for lab in labels:
        by_image.setdefault(lab.image_id, []).append(lab)
    return [BatchItem(i, r, by_image.get(i, [])) for i, (r, _) in sc.items()]


def spearman(x, y):
    return float(spearmanr(np.asarray(x), np.asarray(y)).statistic)
