"""Matplotlib figure rendering for training curves and evaluation reports.

All figures are written to files (Agg backend); nothing is shown
interactively.  SVG output strips volatile metadata so repeated runs
produce stable files.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

VARIANT_LABELS = {
    "vae": "VAE",
    "introvae": "IntroVAE",
    "introvae_latsearch": "IntroVAE+LatSearch",
}
VARIANT_COLORS = {
    "vae": "tab:blue",
    "introvae": "tab:orange",
    "introvae_latsearch": "tab:red",
}


def _save(fig, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    kwargs = {}
    if path.endswith(".svg"):
        kwargs["metadata"] = {"Date": None}
    fig.savefig(path, dpi=120, bbox_inches="tight", **kwargs)
    plt.close(fig)


def plot_loss_curve(csv_path: str, out_path: str) -> None:
    """Loss-vs-step curves from a training CSV (one line per numeric column)."""
    if not os.path.exists(csv_path):
        return
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in rows[0]:
        if key == "step":
            continue
        ax.plot(steps, [float(r[key]) for r in rows], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog")
    ax.legend(fontsize=8)
    ax.set_title(os.path.basename(csv_path))
    _save(fig, out_path)


def plot_roc_curves(roc_curves: dict, figures_dir: str) -> None:
    """Mean ROC per abnormality class, one figure per class, all variants.

    ``roc_curves[variant][class]`` is a list of (fpr, tpr) arrays, one per
    test volume, sharing the threshold grid; curves are averaged per
    threshold index.
    """
    classes = sorted({name for per_variant in roc_curves.values() for name in per_variant})
    for name in classes:
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for variant, per_class in roc_curves.items():
            curves = per_class.get(name)
            if not curves:
                continue
            fpr = np.mean([c[0] for c in curves], axis=0)
            tpr = np.mean([c[1] for c in curves], axis=0)
            fpr = np.concatenate([[1.0], fpr, [0.0]])
            tpr = np.concatenate([[1.0], tpr, [0.0]])
            ax.plot(fpr, tpr, label=VARIANT_LABELS.get(variant, variant), color=VARIANT_COLORS.get(variant))
        ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(name.replace("_", " "))
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=8, loc="lower right")
        _save(fig, os.path.join(figures_dir, f"roc_{name}.png"))
        fig2, ax2 = plt.subplots(figsize=(4.5, 4.5))
        for variant, per_class in roc_curves.items():
            curves = per_class.get(name)
            if not curves:
                continue
            fpr = np.concatenate([[1.0], np.mean([c[0] for c in curves], axis=0), [0.0]])
            tpr = np.concatenate([[1.0], np.mean([c[1] for c in curves], axis=0), [0.0]])
            ax2.plot(fpr, tpr, label=VARIANT_LABELS.get(variant, variant), color=VARIANT_COLORS.get(variant))
        ax2.plot([0, 1], [0, 1], "k--", linewidth=0.8)
        ax2.set_xlabel("false positive rate")
        ax2.set_ylabel("true positive rate")
        ax2.set_title(name.replace("_", " "))
        ax2.legend(fontsize=8, loc="lower right")
        _save(fig2, os.path.join(figures_dir, f"roc_{name}.svg"))


def plot_fidelity(fid_rows: list[dict], out_path: str) -> None:
    """Quality / overlap score distributions per reconstruction variant."""
    if not fid_rows:
        return
    variants = [v for v in VARIANT_LABELS if any(r["variant"] == v for r in fid_rows)]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, key in zip(axes, ("quality", "overlap")):
        data = [[float(r[key]) for r in fid_rows if r["variant"] == v] for v in variants]
        ax.boxplot(data, tick_labels=[VARIANT_LABELS[v] for v in variants], showfliers=False)
        ax.set_title(f"{key} score")
        ax.tick_params(axis="x", labelrotation=15)
    _save(fig, out_path)


def plot_score_panel(x, x_hat, emb_map, l1_map, lesion_mask, out_path: str) -> None:
    """Qualitative panel: input, reconstruction, embedding map, L1 residual."""
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    for ax, (img, title, cmap) in zip(
        axes,
        [
            (x, "input", "gray"),
            (x_hat, "reconstruction", "gray"),
            (emb_map, "abnormality score", "inferno"),
            (l1_map, "L1 residual", "inferno"),
        ],
    ):
        ax.imshow(img, cmap=cmap)
        if lesion_mask is not None and lesion_mask.any():
            ax.contour(lesion_mask, levels=[0.5], colors="cyan", linewidths=0.8)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    _save(fig, out_path)
