"""Figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def confusion_heatmap(cm, path, title: str = "Confusion matrix") -> Path:
    counts = np.asarray(cm.counts)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(cm.classes)), cm.classes)
    ax.set_yticks(range(len(cm.classes)), cm.classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    hi = counts.max() if counts.size else 0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > hi / 2 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def training_curves(log, path) -> Path:
    epochs = [e.epoch for e in log.epochs]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    a.plot(epochs, [e.train_loss for e in log.epochs], marker="o", label="train")
    a.plot(epochs, [e.val_loss for e in log.epochs], marker="o", label="validation")
    a.set_xlabel("epoch")
    a.set_ylabel("cross-entropy")
    a.legend()
    b.plot(epochs, [e.val_accuracy for e in log.epochs], marker="o", color="tab:green")
    b.set_xlabel("epoch")
    b.set_ylabel("validation accuracy")
    lr_ax = b.twinx()
    lr_ax.step(epochs, [e.lr for e in log.epochs], where="post", color="tab:gray", alpha=0.6)
    lr_ax.set_ylabel("learning rate")
    fig.tight_layout()
    return _save(fig, path)


def loss_curve(losses, path, title: str = "denoiser loss", smooth: int = 25) -> Path:
    losses = np.asarray(losses, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(losses, alpha=0.3, color="tab:blue")
    if len(losses) >= smooth:
        kernel = np.ones(smooth) / smooth
        ax.plot(np.arange(smooth - 1, len(losses)), np.convolve(losses, kernel, "valid"), color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("epsilon MSE")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def image_grid(images, path, columns: int = 10, titles=None) -> Path:
    """Images in [0, 1], (n, H, W, C); single-channel images are drawn in grey."""
    images = np.clip(np.asarray(images, dtype=float), 0, 1)
    n = len(images)
    rows = max(1, -(-n // columns))
    fig, axes = plt.subplots(rows, columns, figsize=(columns * 0.9, rows * 0.9 + (0.2 if titles else 0)),
                             squeeze=False)
    for k, ax in enumerate(axes.flat):
        ax.axis("off")
        if k < n:
            img = images[k]
            if img.ndim == 3 and img.shape[-1] == 1:
                ax.imshow(img[..., 0], cmap="gray", vmin=0, vmax=1)
            else:
                ax.imshow(img)
            if titles is not None:
                ax.set_title(str(titles[k]), fontsize=6)
    fig.tight_layout(pad=0.2)
    return _save(fig, path)
