"""Report figures written next to a run's evaluation output."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402
import numpy as np  # noqa: E402

from .patcher import read_patch_manifest  # noqa: E402
from .raster import load_image  # noqa: E402
from .saliency import load_saliency  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "tinymil",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _read_log(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))

    def col(name):
        return np.array([float(r[name]) if r[name] else np.nan for r in rows])
    return col("epoch"), col("train_loss"), col("val_loss")


def training_curves(log_paths: dict, path) -> None:
    """One loss panel per training log (``{title: csv_path}``)."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(log_paths), figsize=(3.4 * len(log_paths), 2.6), squeeze=False)
        for ax, (title, lp) in zip(axes[0], log_paths.items()):
            epoch, tr, va = _read_log(lp)
            ax.plot(epoch, tr, label="train")
            if np.any(np.isfinite(va)):
                ax.plot(epoch, va, label="validation")
            ax.set_xlabel("epoch")
            ax.set_ylabel("loss")
            ax.set_title(title)
            ax.legend(frameon=False)
        _save(fig, path)


def probability_histogram(predictions, threshold: float, path, title="") -> None:
    pos = [p.aggregate_P for p in predictions if p.true_label == "positive"]
    neg = [p.aggregate_P for p in predictions if p.true_label == "negative"]
    bins = np.linspace(0, 1, 21)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.hist(neg, bins=bins, alpha=0.6, label="negative bags")
        ax.hist(pos, bins=bins, alpha=0.6, label="positive bags")
        ax.axvline(threshold, color="k", lw=0.8, ls="--")
        ax.set_xlabel("bag probability P")
        ax.set_ylabel("count")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def saliency_panels(images, saliencies, boxes, titles, path) -> None:
    """Image, saliency overlay and ranked patch boxes for a handful of bags.

    ``boxes[i]`` is a list of ``(rank, center_row, center_col, side)``.
    """
    n = len(images)
    if n == 0:
        return
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, n, figsize=(2.4 * n, 4.8), squeeze=False)
        for i, (img, sal, bx, title) in enumerate(zip(images, saliencies, boxes, titles)):
            top, bottom = axes[0, i], axes[1, i]
            gray = img[:, :, 0] if img.shape[2] == 1 else img
            top.imshow(gray, cmap="gray", vmin=0, vmax=1)
            top.set_title(title)
            bottom.imshow(gray, cmap="gray", vmin=0, vmax=1)
            bottom.imshow(sal, cmap="jet", alpha=0.45)
            for rank, a, b, side in bx:
                half = side / 2
                bottom.add_patch(Rectangle((b - half - 0.5, a - half - 0.5), side, side,
                                           fill=False, lw=0.9, ec="w"))
                bottom.text(b - half + 1, a - half + 6, str(rank), color="w", fontsize=7)
            for ax in (top, bottom):
                ax.set_xticks([])
                ax.set_yticks([])
        _save(fig, path)


def render_run_figures(run, results, max_panels: int = 4) -> None:
    """Figures for a finished run: loss curves, P histograms and saliency panels."""
    out = run.stage_dir("figures")
    logs = {}
    for name, title in (("bag_model", "bag model"), ("instance_model", "instance model")):
        p = run.path(name, "train_log.csv")
        if os.path.exists(p):
            logs[title] = p
    if logs:
        training_curves(logs, os.path.join(out, "training_curves.png"))
    for split, (preds, _) in results.items():
        probability_histogram(preds, run.cfg.threshold, os.path.join(out, f"bag_probabilities_{split}.png"),
                              title=f"{run.cfg.mode}, {split}")

    patches_jsonl = run.path("patches", "patches.jsonl")
    if run.cfg.mode != "salimap" or not os.path.exists(patches_jsonl):
        return
    rows = read_patch_manifest(patches_jsonl)
    test_pos = [p.bag_id for p in results.get("test", ([], None))[0] if p.true_label == "positive"]
    chosen = test_pos[:max_panels]
    manifest = run.manifest("evaluate")
    images, sals, boxes = [], [], []
    for bag_id in chosen:
        bag = manifest.bag(bag_id)
        images.append(run.image("evaluate", bag))
        sals.append(load_saliency(run.path("saliency", bag_id + ".salm")).normalized())
        boxes.append([(r["rank_j"], r["a"], r["b"], r["side_l"]) for r in rows
                      if r["bag_id"] == bag_id and r["origin"] == "salimap"])
    saliency_panels(images, sals, boxes, chosen, os.path.join(out, "saliency_patches.png"))
