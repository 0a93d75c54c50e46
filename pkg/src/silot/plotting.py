"""Figures: metric curves against object count and annotated rollout panels."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

METRICS = (("mota", "MOTA"), ("ap", "AP"), ("count_abs_error", "Count abs. error"))


def plot_metric_curves(reports: list[dict], path) -> Path:
    """One panel per metric, one line per report, object count on the x axis."""
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.2))
    for report in reports:
        xs = [b["n_objects"] for b in report["buckets"]]
        for ax, (key, _) in zip(axes, METRICS):
            ys = [np.nan if b[key] is None else b[key] for b in report["buckets"]]
            ax.plot(xs, ys, marker="o", label=f'{report["model"]} ({report["mode"]})')
    for ax, (_, label) in zip(axes, METRICS):
        ax.set_xlabel("objects per video")
        ax.set_title(label)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def track_color(track_id: int):
    return plt.get_cmap("tab20")(int(track_id) % 20)


def _draw_boxes(ax, objects, gt: bool = False):
    for obj in objects:
        y, x, h, w = obj["box"]
        color = "white" if gt else track_color(obj["id"])
        style = "--" if obj.get("discovered") else "-"
        # imshow puts pixel centres on integers, hence the half-pixel shift
        ax.add_patch(Rectangle((x - w / 2 - 0.5, y - h / 2 - 0.5), w, h, fill=False,
                               edgecolor=color, linestyle=style, linewidth=1.2))


def _tile(maps: list[np.ndarray], shape) -> np.ndarray:
    if not maps:
        return np.zeros(shape + (3,))
    n = int(np.ceil(np.sqrt(len(maps))))
    h, w = maps[0].shape[:2]
    canvas = np.zeros((n * h, n * w, 3))
    for i, m in enumerate(maps):
        r, c = divmod(i, n)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = m
    return canvas


def plot_rollout_panels(frames: np.ndarray, recon: np.ndarray, export: list[dict], path,
                        appearances: list[list[np.ndarray]] | None = None,
                        gt_boxes: list[list[tuple]] | None = None) -> Path:
    """Ground truth / appearances / reconstruction rows, one column per frame.

    Reconstructed boxes are coloured by track id; dashed boxes were discovered in
    that frame, solid ones were propagated.
    """
    T = frames.shape[0]
    rows = 3 if appearances is not None else 2
    fig, axes = plt.subplots(rows, T, figsize=(1.8 * T, 1.9 * rows), squeeze=False)
    for t in range(T):
        ax = axes[0, t]
        ax.imshow(np.clip(frames[t], 0, 1), interpolation="nearest")
        if gt_boxes is not None:
            _draw_boxes(ax, [{"box": b, "id": 0} for b in gt_boxes[t]], gt=True)
        ax.set_title(f"t={t}" + (" (prior)" if export[t].get("prior") else ""), fontsize=8)
        if appearances is not None:
            axes[1, t].imshow(np.clip(_tile(appearances[t], (14, 14)), 0, 1), interpolation="nearest")
        ax = axes[-1, t]
        ax.imshow(np.clip(recon[t], 0, 1), interpolation="nearest")
        _draw_boxes(ax, export[t]["objects"])
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    labels = ["ground truth"] + (["appearances"] if appearances is not None else []) + ["reconstruction"]
    for r, label in enumerate(labels):
        axes[r, 0].set_ylabel(label, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
