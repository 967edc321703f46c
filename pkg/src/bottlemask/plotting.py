"""Static figure emission: mask grids, l1 histograms, region summaries.

Masks are rendered as opacity maps — white means hidden, black means
visible to the classifier — which inverts the in-memory convention
(mask value 1 = visible pixel); every figure states this in its legend.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MaskStats


def _to_display(image: np.ndarray) -> np.ndarray:
    """(H, W, C) float -> displayable grayscale or RGB."""
    if image.shape[-1] == 1:
        return image[..., 0]
    return image


def save_mask_grid(images: np.ndarray, masks: np.ndarray, path: Path | str,
                   max_cols: int = 8) -> Path:
    """Three rows per figure: originals, opacity maps, masked images."""
    path = Path(path)
    n = min(images.shape[0], max_cols)
    fig, axes = plt.subplots(3, n, figsize=(1.6 * n, 5.0), squeeze=False)
    for j in range(n):
        axes[0][j].imshow(_to_display(images[j]), cmap="gray", vmin=0, vmax=1)
        axes[1][j].imshow(1.0 - masks[j], cmap="gray", vmin=0, vmax=1)
        masked = images[j] * masks[j][..., None]
        axes[2][j].imshow(_to_display(masked), cmap="gray", vmin=0, vmax=1)
        for row in range(3):
            axes[row][j].set_xticks([])
            axes[row][j].set_yticks([])
    axes[0][0].set_ylabel("image")
    axes[1][0].set_ylabel("opacity")
    axes[2][0].set_ylabel("masked")
    fig.suptitle("mask rendering: white = hidden (opaque), black = visible")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_l1_histograms(stats: MaskStats, png_path: Path | str,
                       csv_path: Path | str) -> tuple[Path, Path]:
    """Per-class histograms of the visible fraction, as image and CSV.

    CSV columns: bin_left, bin_right, count_class0, count_class1, ...
    """
    png_path, csv_path = Path(png_path), Path(csv_path)
    edges = stats.bin_edges
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right"]
                        + [f"count_class{k}" for k in range(stats.n_classes)])
        for b in range(len(edges) - 1):
            writer.writerow([f"{edges[b]:.6f}", f"{edges[b + 1]:.6f}"]
                            + [int(stats.histograms[k][b]) for k in range(stats.n_classes)])

    fig, ax = plt.subplots(figsize=(6, 4))
    centers = 0.5 * (edges[:-1] + edges[1:])
    for k in range(stats.n_classes):
        ax.step(centers, stats.histograms[k], where="mid", label=f"class {k}")
    ax.set_xlabel("visible fraction (per-pixel mask mean, 1 = fully visible)")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path, csv_path


def read_histogram_csv(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    """Return (edges, counts[k][bin]) re-read from a histogram CSV."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            rows.append(row)
    n_classes = len(header) - 2
    edges = np.array([float(r[0]) for r in rows] + [float(rows[-1][1])])
    counts = np.array([[int(r[2 + k]) for r in rows] for k in range(n_classes)])
    return edges, counts


def save_region_summary(pairs: dict[str, tuple[float, float]], path: Path | str,
                        title: str = "visible fraction by region") -> Path:
    """Grouped bars of inside/outside visible fractions per group label."""
    path = Path(path)
    labels = list(pairs)
    inside = [pairs[k][0] for k in labels]
    outside = [pairs[k][1] for k in labels]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(labels), 4))
    ax.bar(x - 0.2, inside, width=0.4, label="inside region")
    ax.bar(x + 0.2, outside, width=0.4, label="outside region")
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel("visible fraction")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
