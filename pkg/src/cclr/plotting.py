"""Matplotlib figures written next to the CSV and JSON reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # Fixed metadata keeps repeated runs byte-identical.
    "svg.hashsalt": "cclr",
}
PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=PNG_METADATA, bbox_inches="tight")
    plt.close(fig)


def plot_loss_profiles(profiles, path, title=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for prof in profiles:
            ax.errorbar(prof.centers, prof.means, yerr=prof.stderrs, marker="o", ms=3, capsize=2, label=prof.label)
        ax.set_xlabel("t / T")
        ax.set_ylabel("mean L1 noise residual")
        ax.set_xlim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)
    return path


def plot_score_violins(reports, path):
    """One violin pair (ID, OOD) per report, AUROC in the tick label."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.3 * len(reports) + 1.5, 3.0))
        pos = np.arange(len(reports)) * 3.0
        data_id = [np.asarray(r.id_scores) for r in reports]
        data_ood = [np.asarray(r.ood_scores) for r in reports]
        # Scores differ in scale per column; standardise each pair jointly.
        scaled_id, scaled_ood = [], []
        for a, b in zip(data_id, data_ood):
            both = np.concatenate([a, b])
            mu, sd = both.mean(), both.std() or 1.0
            scaled_id.append((a - mu) / sd)
            scaled_ood.append((b - mu) / sd)
        v1 = ax.violinplot(scaled_id, positions=pos - 0.6, showmedians=True)
        v2 = ax.violinplot(scaled_ood, positions=pos + 0.6, showmedians=True)
        for body in v1["bodies"]:
            body.set_facecolor("tab:blue")
        for body in v2["bodies"]:
            body.set_facecolor("tab:orange")
        ax.set_xticks(pos)
        ax.set_xticklabels([f"{r.name}\n{r.auroc:.3f}" for r in reports])
        ax.set_ylabel("standardised ID score")
        ax.legend([v1["bodies"][0], v2["bodies"][0]], ["ID", "OOD"], frameon=False)
        _save(fig, path)
    return path


def _to_display(img):
    img = np.asarray(img)
    if img.shape[0] == 1:
        return img[0], "gray"
    return np.transpose(img, (1, 2, 0)), None


def plot_reconstruction_grid(x0, recons, timesteps, path):
    """Rows: original, noised, reconstructed, loss map. One column per ``t``."""
    n = len(timesteps)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(4, n, figsize=(1.3 * n, 5.4), squeeze=False)
        rows = ["original", "noised", "reconstructed", "loss map"]
        for j, (t, rec) in enumerate(zip(timesteps, recons)):
            panels = [
                ((np.asarray(x0) + 1) / 2, (0, 1)),
                ((np.clip(rec.x_t, -1, 1) + 1) / 2, (0, 1)),
                ((rec.x0_hat + 1) / 2, (0, 1)),
                (rec.loss_map.mean(axis=0, keepdims=True), (0, None)),
            ]
            for i, (img, (lo, hi)) in enumerate(panels):
                ax = axes[i, j]
                shown, cmap = _to_display(img)
                if i == 3:
                    cmap = "magma"
                ax.imshow(np.clip(shown, 0, 1) if i < 3 else shown, cmap=cmap, vmin=lo, vmax=hi)
                ax.set_xticks([])
                ax.set_yticks([])
                if j == 0:
                    ax.set_ylabel(rows[i])
            axes[0, j].set_title(f"t = {t}")
        _save(fig, path)
    return axes.shape
