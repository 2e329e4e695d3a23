"""Figures written alongside CLI reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps/software tags, so PNGs are byte-stable for a fixed input
_PNG_META = {"Software": None}

plt.rcParams.update({
    "figure.figsize": (5.5, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
})


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_nfe(reports, path):
    """Measured NFE against video length, one line per method."""
    fig, ax = plt.subplots()
    methods = sorted({r.method for r in reports})
    for method in methods:
        rows = sorted((r for r in reports if r.method == method), key=lambda r: (r.L, r.s))
        ax.plot([r.L for r in rows], [r.measured for r in rows], marker="o", label=method)
    ax.set_xlabel("video length L (frames)")
    ax.set_ylabel("forward passes")
    ax.set_yscale("log")
    if methods:
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_schedule(matrix, path, title="pyramid schedule"):
    fig, ax = plt.subplots()
    im = ax.imshow(np.asarray(matrix), aspect="auto", interpolation="nearest", cmap="viridis")
    ax.set_xlabel("frame")
    ax.set_ylabel("row (forward pass)")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="noise step")
    return _save(fig, path)


def plot_training(losses, accuracies, path, window: int = 50):
    fig, ax = plt.subplots()
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.6, alpha=0.4, color="C0")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], smooth, color="C0", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("masked CE")
    ax2 = ax.twinx()
    ax2.plot(steps, accuracies, lw=0.6, color="C1", label="masked accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.set_ylabel("accuracy")
    return _save(fig, path)


def plot_chunk_accuracy(curve, path):
    fig, ax = plt.subplots()
    ax.plot(np.arange(len(curve)), curve, marker="o")
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("chunk index")
    ax.set_ylabel("token accuracy")
    return _save(fig, path)
