"""CSV/JSON emission and matplotlib figures for experiment reports.

Figures are written with the Agg backend and without PNG metadata so that
identical data gives identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# golden CSV headers; FORMATS.md documents the columns
LOSSES_HEADER = ["iteration", "L_sup", "L_PLRW", "L_CPRL", "L_unsup", "L_total",
                 "lambda_u", "n_sup", "n_plrw", "n_cprl", "n_pastes_accepted",
                 "n_pastes_rejected", "teacher_param_norm"]
SWEEP_HEADER = ["gamma_hat", "n_kept", "tp", "fp", "fn", "precision", "recall"]
SWEEP_NOTE = "# empty filtered set reports precision=1 and recall=0"
AP_HEADER = ["class_id", "ap"]
PR_HEADER = ["confidence", "precision", "recall"]
REGIME_HEADER = ["regime", "n_labels", "mean_R", "mean_R_tp", "mean_R_fp"]
RELIABILITY_HEADER = ["image_id", "label_id", "class_id", "score", "reliability",
                      "true_iou", "is_tp"]

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, header: Sequence[str], rows: Iterable[dict],
              note: Optional[str] = None) -> None:
    with open(path, "w", newline="") as fh:
        if note:
            fh.write(note + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save(fig, path) -> None:
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_sweep(rows: Sequence[dict], path) -> None:
    """Precision and recall of the surviving pseudo-labels against the threshold."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        g = [r["gamma_hat"] for r in rows]
        ax.plot(g, [r["precision"] for r in rows], "o-", label="precision")
        ax.plot(g, [r["recall"] for r in rows], "s--", label="recall")
        ax.set_xlabel("reliability threshold")
        ax.set_ylabel("fraction")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="lower left")
        fig.tight_layout()
        _save(fig, path)


def plot_reliability_hist(r_tp: Sequence[float], r_fp: Sequence[float], r_max: float,
                          path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bins = [0.5 + k * (r_max - 0.5) / 20 for k in range(21)]
        ax.hist([list(r_tp), list(r_fp)], bins=bins, label=["true positive", "false positive"],
                color=["tab:blue", "tab:red"], alpha=0.8)
        ax.set_xlabel("reliability score")
        ax.set_ylabel("pseudo-labels")
        ax.legend(loc="upper left")
        fig.tight_layout()
        _save(fig, path)


def plot_losses(rows: Sequence[dict], path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        it = [r["iteration"] for r in rows]
        for key, style in (("L_sup", "o-"), ("L_PLRW", "s-"), ("L_CPRL", "^-"),
                           ("L_total", "k--")):
            ax.plot(it, [r[key] for r in rows], style, label=key, markersize=3)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(loc="upper right")
        fig.tight_layout()
        _save(fig, path)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
