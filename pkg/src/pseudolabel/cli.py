"""Command-line entry point: ``pseudolabel {split,score,mix,losses,simulate,evaluate}``.

Every subcommand is deterministic given its config and seed. Failures exit
nonzero with a one-line JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import datasets_io as dio
from . import reports
from .config import HarnessConfig, dump_config, load_config
from .evaluation import evaluate, labels_as_detections, reliability_sweep
from .geometry import iou
from .losses import assign, cls_loss, reg_loss, unsupervised_report
from .ompl import BatchItem, mix_batch
from .reliability import ScoredPseudoLabel, assess, filter_reliable
from .synthetic import SyntheticDetector, make_scene
from .teacher_student import run_iteration, subseed, teacher_pass
from .views import IDENTITY, ViewTransform

log = logging.getLogger("pseudolabel")

ROLE_SCENE, ROLE_BATCH, ROLE_PARAMS, ROLE_SCORE = 10, 11, 12, 13


class UsageError(ValueError):
    pass


def _out_dir(cfg: HarnessConfig) -> Path:
    return reports.ensure_dir(cfg.paths.out)


def _require_dataset(cfg: HarnessConfig, check_files: bool = True) -> dio.Dataset:
    if not cfg.paths.dataset:
        raise UsageError("paths.dataset is not set (config, PSEUDOLABEL_DATASET)")
    return dio.load_dataset(cfg.paths.dataset, cfg.paths.images, check_files=check_files)


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# split


def cmd_split(cfg: HarnessConfig, args) -> dict:
    ds = _require_dataset(cfg, check_files=False)
    fraction = args.fraction if args.fraction is not None else cfg.split.labeled_fraction
    spec = dio.SplitSpec(fraction, cfg.seed, cfg.split.stratify_by_class)
    labeled, unlabeled = dio.make_split(ds, spec)
    out = _out_dir(cfg)
    dio.write_ids(out / "labeled.txt", labeled)
    dio.write_ids(out / "unlabeled.txt", unlabeled)
    return {"labeled": len(labeled), "unlabeled": len(unlabeled), "fraction": fraction}


# ---------------------------------------------------------------------------
# score


def _parse_view_files(items) -> dict:
    files = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--detections expects VIEW=PATH, got {item!r}")
        view, path = item.split("=", 1)
        files[view] = path
    return files


def _frame_size(ds_set, dataset):
    if ds_set.width is not None and ds_set.height is not None:
        return int(ds_set.width), int(ds_set.height)
    if dataset is not None:
        info = dataset.image(ds_set.image_id)
        return info.width, info.height
    raise UsageError(f"image {ds_set.image_id}: frame size unknown; add width/height to "
                     "the records or set paths.dataset")


def cmd_score(cfg: HarnessConfig, args) -> dict:
    files = _parse_view_files(args.detections)
    views = cfg.reliability.views
    for name in [IDENTITY] + [v.kind for v in views]:
        if name not in files:
            raise UsageError(f"missing detections file for view {name!r}")
        if not Path(files[name]).exists():
            raise UsageError(f"detections file for view {name!r} not found: {files[name]}")
    dataset = _require_dataset(cfg, check_files=False) if cfg.paths.dataset else None
    by_view = {name: {d.image_id: d for d in dio.read_detections(path)}
               for name, path in files.items()}

    labels = []
    for image_id in sorted(by_view[IDENTITY]):
        orig = by_view[IDENTITY][image_id]
        w, h = _frame_size(orig, dataset)
        aug, transforms = [], []
        for spec in views:
            dets = by_view[spec.kind].get(image_id)
            if dets is None:
                raise UsageError(f"view {spec.kind!r} has no record for image {image_id}")
            aug.append(dets)
            transforms.append(ViewTransform(spec.kind, w, h, spec.scale_factor))
        labels.extend(assess(orig, aug, transforms, cfg.reliability))

    out = _out_dir(cfg)
    dio.write_scored(out / "scored.jsonl", labels,
                     {"H": cfg.reliability.H, "gamma_hat": cfg.reliability.gamma_hat})
    r_max = cfg.reliability.r_max
    rs = [lab.reliability for lab in labels]
    return {"n_labels": len(labels),
            "n_reliable": len(filter_reliable(labels, cfg.reliability.gamma_hat)),
            "mean_R": float(np.mean(rs)) if rs else None,
            "all_at_max": bool(rs) and all(r == r_max for r in rs),
            "R_max": r_max}


# ---------------------------------------------------------------------------
# mix


def cmd_mix(cfg: HarnessConfig, args) -> dict:
    ds = _require_dataset(cfg)
    _, labels = dio.read_scored(args.scored)
    by_image: dict = {}
    for lab in labels:
        by_image.setdefault(lab.image_id, []).append(lab)
    ids = sorted(ds.ids)
    mcfg = cfg.engine().mix
    out = _out_dir(cfg)
    mixed_dir = reports.ensure_dir(out / "mixed")
    plans, mixed_labels = [], []
    k = cfg.batch_size
    for batch_id, start in enumerate(range(0, len(ids), k)):
        batch = [BatchItem(i, dio.read_raster(ds.image_path(i)), by_image.get(i, []))
                 for i in ids[start:start + k]]
        mixed, plan = mix_batch(batch, mcfg, batch_id=batch_id)
        dio.write_png(mixed_dir / f"{mixed.image_id}.png", mixed.raster)
        plans.append(plan)
        mixed_labels.extend(mixed.labels)
    with open(out / "mix_plans.jsonl", "w") as fh:
        for plan in plans:
            fh.write(dio.dumps(dio.plan_to_dict(plan)) + "\n")
    dio.write_scored(out / "mixed_labels.jsonl", mixed_labels,
                     {"gamma_hat": mcfg.gamma_hat, "delta": mcfg.delta})
    return {"batches": len(plans),
            "accepted": sum(len(p.accepted) for p in plans),
            "rejected": sum(len(p.rejected) for p in plans),
            "labels": len(mixed_labels)}


# ---------------------------------------------------------------------------
# losses


def cmd_losses(cfg: HarnessConfig, args) -> dict:
    student = {d.image_id: d for d in dio.read_detections(args.student)}
    _, labels = dio.read_scored(args.scored)
    gamma = cfg.reliability.gamma_hat
    by_image: dict = {}
    for lab in filter_reliable(labels, gamma):
        by_image.setdefault(lab.image_id, []).append(lab)
    pairs = []
    for image_id in sorted(student):
        pairs.extend(assign(student[image_id], by_image.get(image_id, []),
                            cfg.loss.assign_min_iou))
    L_sup, n_sup = 0.0, 0
    if args.sup_preds:
        ds = _require_dataset(cfg, check_files=False)
        sup_pairs = []
        for d in sorted(dio.read_detections(args.sup_preds), key=lambda d: d.image_id):
            gt_labels = [ScoredPseudoLabel(f"gt/{i}", d.image_id, b, 1.0)
                         for i, b in enumerate(ds.gt(d.image_id))]
            sup_pairs.extend(assign(d, gt_labels, cfg.loss.assign_min_iou))
        if sup_pairs:
            L_sup = math.fsum(cls_loss(p) + reg_loss(p) for p in sup_pairs) / len(sup_pairs)
            n_sup = len(sup_pairs)
    report = unsupervised_report(pairs, gamma, L_sup, n_sup, cfg.loss.lambda_u)
    row = report.as_row()
    row["unsup_identity_holds"] = report.L_unsup == report.L_PLRW + report.L_CPRL
    out = _out_dir(cfg)
    reports.write_json(out / "losses.json", dict(row, pairs=report.pairs))
    return row


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(cfg: HarnessConfig, args) -> dict:
    ds = _require_dataset(cfg, check_files=False)
    thresh = args.iou_thresh if args.iou_thresh is not None else cfg.iou_thresh
    if args.scored:
        _, labels = dio.read_scored(args.scored)
        preds = labels_as_detections(filter_reliable(labels, cfg.reliability.gamma_hat))
    elif args.preds:
        preds = dio.read_detections(args.preds)
    else:
        raise UsageError("evaluate needs --preds or --scored")
    rep = evaluate(preds, ds, thresh)
    out = _out_dir(cfg)
    _write_eval(out, rep)
    return {"mAP": rep.mAP, "precision": rep.precision, "recall": rep.recall,
            "tp": rep.tp, "fp": rep.fp, "fn": rep.fn, "iou_thresh": thresh}


def _write_eval(out: Path, rep, prefix: str = "eval") -> None:
    reports.write_json(out / f"{prefix}.json", rep.as_dict())
    reports.write_csv(out / f"{prefix}_ap.csv", reports.AP_HEADER,
                      [{"class_id": c, "ap": a} for c, a in sorted(rep.ap.items())])
    reports.write_csv(out / f"{prefix}_pr.csv", reports.PR_HEADER, rep.pr_curve)


# ---------------------------------------------------------------------------
# simulate


def _true_match(box, gt):
    if not gt:
        return 0.0, False
    best = max(gt, key=lambda g: iou(g, box))
    v = iou(best, box)
    return v, v >= 0.5 and best.class_id == box.class_id


def _score_corpus(detector, images, engine, seed, params) -> list:
    labels = []
    for idx, (image_id, raster) in enumerate(images):
        _, scored = teacher_pass(detector, image_id, raster, params,
                                 subseed(seed, ROLE_SCORE, idx), engine)
        labels.extend(scored)
    return labels


def cmd_simulate(cfg: HarnessConfig, args) -> dict:
    sim = cfg.simulate
    engine = cfg.engine()
    out = _out_dir(cfg)

    ids = [f"img{i:05d}" for i in range(sim.n_images)]
    scenes, rasters = {}, {}
    for i, image_id in enumerate(ids):
        r, gt = make_scene(subseed(cfg.seed, ROLE_SCENE, i), sim.width, sim.height,
                           sim.num_classes)
        rasters[image_id], scenes[image_id] = r, gt
    noise = dataclasses.replace(cfg.noise, num_classes=sim.num_classes)
    split = dio.SplitSpec(cfg.split.labeled_fraction, cfg.seed, cfg.split.stratify_by_class)
    gt_ds = dio.dataset_from_scenes(scenes, {i: (sim.width, sim.height) for i in ids},
                                    sim.num_classes)
    labeled, unlabeled = dio.make_split(gt_ds, split)
    if not unlabeled:
        raise UsageError("split leaves no unlabeled images")
    dio.write_ids(out / "labeled.txt", labeled)
    dio.write_ids(out / "unlabeled.txt", unlabeled)

    prng = np.random.default_rng([cfg.seed, ROLE_PARAMS])
    teacher = np.zeros(sim.param_dim)
    student = prng.normal(size=sim.param_dim)

    # teacher pseudo-labels over every unlabeled image
    detector = SyntheticDetector(scenes, noise)
    unl_images = [(i, rasters[i]) for i in unlabeled]
    labels = _score_corpus(detector, unl_images, engine, cfg.seed, teacher)
    dio.write_scored(out / "pseudo_labels.jsonl", labels,
                     {"H": cfg.reliability.H, "gamma_hat": cfg.reliability.gamma_hat})
    unl_gt = {i: scenes[i] for i in unlabeled}
    reliable = filter_reliable(labels, cfg.reliability.gamma_hat)
    rep = evaluate(labels_as_detections(reliable), unl_gt, cfg.iou_thresh)
    _write_eval(out, rep, "pseudo_eval")

    rel_rows, r_tp, r_fp = [], [], []
    for lab in labels:
        v, hit = _true_match(lab.box, unl_gt[lab.image_id])
        rel_rows.append({"image_id": lab.image_id, "label_id": lab.label_id,
                         "class_id": lab.box.class_id, "score": lab.box.score,
                         "reliability": lab.reliability, "true_iou": v, "is_tp": int(hit)})
        (r_tp if hit else r_fp).append(lab.reliability)
    reports.write_csv(out / "reliability.csv", reports.RELIABILITY_HEADER, rel_rows)

    sweep = reliability_sweep(labels, unl_gt, sim.sweep_thresholds, cfg.iou_thresh)
    reports.write_csv(out / "sweep.csv", reports.SWEEP_HEADER, sweep, reports.SWEEP_NOTE)

    # same jitter, correlated versus independent per-view noise
    regimes = []
    for name, corr in (("correlated", True), ("independent", False)):
        det = SyntheticDetector(scenes, dataclasses.replace(noise, correlated=corr))
        labs = _score_corpus(det, unl_images, engine, cfg.seed, teacher)
        tp_r, fp_r = [], []
        for lab in labs:
            (tp_r if _true_match(lab.box, unl_gt[lab.image_id])[1] else fp_r).append(
                lab.reliability)
        all_r = tp_r + fp_r
        regimes.append({"regime": name, "n_labels": len(all_r),
                        "mean_R": float(np.mean(all_r)) if all_r else 0.0,
                        "mean_R_tp": float(np.mean(tp_r)) if tp_r else 0.0,
                        "mean_R_fp": float(np.mean(fp_r)) if fp_r else 0.0})
    reports.write_csv(out / "regimes.csv", reports.REGIME_HEADER, regimes)

    # teacher-student iterations
    brng = np.random.default_rng([cfg.seed, ROLE_BATCH])
    loss_rows = []
    with open(out / "traces.jsonl", "w") as fh:
        for it in range(sim.iterations):
            u_idx = brng.choice(len(unlabeled), size=min(cfg.batch_size, len(unlabeled)),
                                replace=False)
            l_idx = (brng.choice(len(labeled), size=min(sim.labeled_batch_size, len(labeled)),
                                 replace=False) if labeled else [])
            ubatch = [(unlabeled[k], rasters[unlabeled[k]]) for k in sorted(u_idx)]
            lbatch = [(labeled[k], rasters[labeled[k]], scenes[labeled[k]])
                      for k in sorted(l_idx)]
            trace = run_iteration(lbatch, ubatch, detector, engine,
                                  subseed(cfg.seed, ROLE_BATCH, it), teacher, student,
                                  iteration=it, batch_id=it)
            teacher = trace.teacher_params
            fh.write(trace.dumps() + "\n")
            row = {"iteration": it, **trace.losses.as_row(),
                   "n_pastes_accepted": len(trace.mix_plan.accepted),
                   "n_pastes_rejected": len(trace.mix_plan.rejected),
                   "teacher_param_norm": float(np.linalg.norm(teacher))}
            loss_rows.append(row)
    reports.write_csv(out / "losses.csv", reports.LOSSES_HEADER, loss_rows)

    if sim.figures:
        reports.plot_sweep(sweep, out / "sweep.png")
        reports.plot_reliability_hist(r_tp, r_fp, cfg.reliability.r_max,
                                      out / "reliability_hist.png")
        if loss_rows:
            reports.plot_losses(loss_rows, out / "losses.png")

    summary = {
        "n_images": sim.n_images, "n_labeled": len(labeled), "n_unlabeled": len(unlabeled),
        "n_pseudo_labels": len(labels), "n_reliable": len(reliable),
        "pseudo_label_mAP": rep.mAP,
        "mean_R_tp": float(np.mean(r_tp)) if r_tp else None,
        "mean_R_fp": float(np.mean(r_fp)) if r_fp else None,
        "regime_separation": regimes[0]["mean_R"] - regimes[1]["mean_R"],
        "R_max": cfg.reliability.r_max,
        "all_R_at_max": bool(labels) and all(lab.reliability == cfg.reliability.r_max
                                             for lab in labels),
        "max_L_PLRW": max((r["L_PLRW"] for r in loss_rows), default=0.0),
        "max_L_CPRL": max((r["L_CPRL"] for r in loss_rows), default=0.0),
    }
    reports.write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------


COMMANDS = {"split": cmd_split, "score": cmd_score, "mix": cmd_mix, "losses": cmd_losses,
            "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--out", help="output directory (overrides paths.out)")
    common.add_argument("--iou-thresh", type=float, dest="iou_thresh",
                        help="IoU threshold for matching against ground truth")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pseudolabel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("split", parents=[common], help="write labeled/unlabeled id files")
    p.add_argument("--fraction", type=float, help="labeled fraction (overrides config)")
    p = sub.add_parser("score", parents=[common], help="score multi-view detections")
    p.add_argument("--detections", action="append", metavar="VIEW=PATH",
                   help="detection records for one view (identity, mirror, scale)")
    p = sub.add_parser("mix", parents=[common], help="paste reliable chips into batches")
    p.add_argument("--scored", required=True, help="scored pseudo-label file")
    p = sub.add_parser("losses", parents=[common], help="compute a loss report")
    p.add_argument("--student", required=True, help="student detection records")
    p.add_argument("--scored", required=True, help="scored pseudo-label file")
    p.add_argument("--sup-preds", dest="sup_preds",
                   help="student detections on labeled images (uses paths.dataset gt)")
    sub.add_parser("simulate", parents=[common], help="seeded end-to-end experiment")
    p = sub.add_parser("evaluate", parents=[common], help="mAP against ground truth")
    p.add_argument("--preds", help="detection records")
    p.add_argument("--scored", help="scored pseudo-labels (filtered by gamma_hat)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.iou_thresh is not None:
            changes["iou_thresh"] = args.iou_thresh
        if args.out:
            changes["paths"] = dataclasses.replace(cfg.paths, out=args.out)
        cfg = dataclasses.replace(cfg, **changes)
        dump_config(cfg, _out_dir(cfg) / "config.json")
        result = COMMANDS[args.command](cfg, args)
    except Exception as exc:  # every failure becomes a machine-readable record
        log.debug("command failed", exc_info=True)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return 1
    _print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
