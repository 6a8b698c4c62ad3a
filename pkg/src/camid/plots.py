"""Report figures written next to the CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

# fixed metadata keeps repeated renders byte-stable
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def confusion_figure(cm, path, title="Confusion matrix (% of target class)"):
    pct = cm.percentages()
    n = len(cm.classes)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 0.55 * n, 1.0 + 0.5 * n))
        im = ax.imshow(pct, cmap="Blues", vmin=0, vmax=100)
        for i in range(n):
            for j in range(n):
                ax.text(j, i, f"{pct[i, j]:.1f}", ha="center", va="center",
                        color="white" if pct[i, j] > 60 else "black", fontsize=7)
        ax.set_xticks(range(n), cm.classes, rotation=45, ha="right")
        ax.set_yticks(range(n), cm.classes)
        ax.set_xlabel("Output class")
        ax.set_ylabel("Target class")
        ax.set_title(f"{title}\naccuracy {100 * cm.accuracy:.1f}%")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        _save(fig, path)


def curve_figure(curve, path):
    ks, accs = zip(*curve)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.plot(ks, 100 * np.asarray(accs), marker="o", color="tab:orange")
        ax.set_xlabel("voting patches per image (K)")
        ax.set_ylabel("image accuracy [%]")
        ax.set_ylim(0, 100)
        ax.grid(alpha=0.3)
        _save(fig, path)


def training_figure(history, path):
    epochs = [e.epoch for e in history]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.plot(epochs, [e.train_loss for e in history], label="train")
        ax.plot(epochs, [e.val_loss for e in history], label="validation")
        best = min(history, key=lambda e: (e.val_loss, e.epoch))
        ax.axvline(best.epoch, color="grey", ls=":", lw=1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        ax.legend()
        _save(fig, path)


def label_map_figure(grid, classes, path, image=None):
    grid = np.asarray(grid)
    n = len(classes)
    colors = plt.get_cmap("tab10" if n <= 10 else "tab20")(np.arange(n))
    rgb = np.ones(grid.shape + (3,))
    valid = grid >= 0
    rgb[valid] = colors[grid[valid], :3]
    with plt.rc_context(RC):
        ncols = 2 if image is not None else 1
        fig, axes = plt.subplots(1, ncols, figsize=(3.2 * ncols, 3.2))
        axes = np.atleast_1d(axes)
        if image is not None:
            axes[0].imshow(image)
            axes[0].set_title("image")
            axes[0].axis("off")
        ax = axes[-1]
        ax.imshow(rgb, interpolation="nearest")
        ax.set_title("block attribution")
        ax.axis("off")
        handles = [plt.Rectangle((0, 0), 1, 1, color=colors[i]) for i in range(n)]
        ax.legend(handles, classes, loc="upper left", bbox_to_anchor=(1.01, 1.0), frameon=False)
        _save(fig, path)
