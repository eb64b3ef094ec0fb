"""CSV reports and the matplotlib figures rendered next to them."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geom import box3d_corners  # noqa: E402

SUMMARY_HEADER = ("frame_id", "points_in", "points_out", "frusta", "fg_fraction")
METRICS_HEADER = ("epoch", "loss", "accuracy", "aux_accuracy")
CHECK_HEADER = ("check", "status", "measured", "tolerance")

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
})


def fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(history: Sequence[Sequence[float]], path) -> Path:
    """Loss and accuracy per epoch from (epoch, loss, accuracy, aux_accuracy) rows."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3))
    if history:
        h = np.asarray(history, dtype=np.float64)
        ax_loss.plot(h[:, 0], h[:, 1], color="tab:blue", marker=".")
        ax_acc.plot(h[:, 0], h[:, 2], label="segmentation", marker=".")
        ax_acc.plot(h[:, 0], h[:, 3], label="auxiliary head", marker=".")
        ax_acc.legend(frameon=False)
    ax_loss.set(xlabel="epoch", ylabel="loss", title="training loss")
    ax_acc.set(xlabel="epoch", ylabel="per-point accuracy", ylim=(0, 1.02), title="accuracy")
    return _save(fig, path)


def plot_recode_summary(rows: Sequence[Sequence], path) -> Path:
    fig, (ax_pts, ax_fg) = plt.subplots(1, 2, figsize=(9, 3))
    if rows:
        ids = [str(r[0]) for r in rows]
        x = np.arange(len(rows))
        ax_pts.bar(x - 0.2, [r[1] for r in rows], width=0.4, label="points in")
        ax_pts.bar(x + 0.2, [r[2] for r in rows], width=0.4, label="recoded rows")
        ax_pts.set_xticks(x, ids, rotation=60, fontsize=7)
        ax_pts.legend(frameon=False)
        ax_fg.bar(x, [r[4] for r in rows], color="tab:green")
        ax_fg.set_xticks(x, ids, rotation=60, fontsize=7)
    ax_pts.set(ylabel="count", title="frustum extraction")
    ax_fg.set(ylabel="foreground fraction", ylim=(0, 1), title="seg_label = 1 share")
    return _save(fig, path)


def plot_check_report(rows: Sequence[Sequence], path) -> Path:
    """Measured value over tolerance per check on a log axis; failures in red."""
    fig, ax = plt.subplots(figsize=(7, 0.25 * max(len(rows), 4) + 1))
    names, ratios, colors = [], [], []
    for name, status, measured, tol in rows:
        m, t = float(measured), float(tol)
        ratio = m / t if t > 0 else (0.0 if m == 0 else np.inf)
        names.append(name)
        ratios.append(max(ratio, 1e-12))
        colors.append("tab:green" if status == "pass" else "tab:red")
    y = np.arange(len(names))
    ax.barh(y, ratios, color=colors)
    ax.axvline(1.0, color="k", lw=0.8, ls="--")
    ax.set_xscale("log")
    ax.set_yticks(y, names, fontsize=7)
    ax.invert_yaxis()
    ax.set(xlabel="measured / tolerance (floored at 1e-12)", title="verification checks")
    return _save(fig, path)


def plot_frame_bev(points: np.ndarray, recoded: np.ndarray, gt_boxes, path, title: str = "") -> Path:
    """Bird's-eye view: raw points, frustum points by index, foreground, GT boxes."""
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.scatter(points[:, 0], points[:, 1], s=0.3, c="0.75", rasterized=True)
    if len(recoded):
        ax.scatter(recoded[:, 0], recoded[:, 1], s=0.8, c=recoded[:, -1], cmap="tab10", rasterized=True)
        fg = recoded[:, -3] > 0.5
        ax.scatter(recoded[fg, 0], recoded[fg, 1], s=1.5, c="k", rasterized=True)
    for b in gt_boxes:
        c = box3d_corners(b)[:4]
        ax.plot(np.r_[c[:, 0], c[0, 0]], np.r_[c[:, 1], c[0, 1]], color="tab:red", lw=1)
    ax.set(xlabel="x (m)", ylabel="y (m)", title=title or "bird's-eye view", aspect="equal")
    return _save(fig, path)
