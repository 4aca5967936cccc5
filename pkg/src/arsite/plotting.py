"""Report figures for detection runs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_detection_figure(img, detections, out_path, names=None, title=None):
    """Save a PNG of the frame with detected quads drawn on top.

    Args:
        img: grayscale frame, uint8 (h, w).
        detections: list of marker.Detection.
        out_path: where the PNG goes.
        names: optional {marker_id: building name} for labels.
        title: optional figure title (usually the frame file name).
    """
    names = names or {}
    fig, ax = plt.subplots(figsize=(7, 7 * img.shape[0] / img.shape[1]))
    ax.imshow(img, cmap="gray", vmin=0, vmax=255, interpolation="nearest")
    for det in detections:
        ring = np.vstack([det.corners, det.corners[:1]])
        ax.plot(ring[:, 0], ring[:, 1], color="tab:orange", linewidth=1.5)
        ax.plot(det.corners[0, 0], det.corners[0, 1], "o", color="tab:red", markersize=4)
        label = names.get(det.marker_id, f"id {det.marker_id}")
        ax.annotate(
            f"{label} ({det.confidence:.2f})",
            xy=(float(det.corners[:, 0].mean()), float(det.corners[:, 1].min()) - 6),
            color="tab:orange",
            fontsize=9,
            ha="center",
        )
    if title:
        ax.set_title(title, fontsize=10)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
