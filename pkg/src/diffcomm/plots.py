"""Figure rendering for sweep reports.

One PNG per (dataset, channel, metric): the metric against channel SNR
with one line per receiver mode. Uses the Agg backend so plots render
identically in headless runs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

_METRIC_LABELS = {"psnr_db": "PSNR (dB)", "ms_ssim": "MS-SSIM"}
_MARKERS = ("o", "s", "^", "d")


def plot_metric_vs_snr(rows, dataset: str, channel: str, metric: str, out_path: Path) -> Path:
    """Render one metric-vs-SNR figure for the given (dataset, channel) cell group.

    ``rows`` is any iterable of objects with dataset/channel/snr_db/mode
    attributes plus the requested metric attribute.
    """
    if metric not in _METRIC_LABELS:
        raise ValueError(f"metric must be one of {sorted(_METRIC_LABELS)}, got {metric!r}")
    selected = [r for r in rows if r.dataset == dataset and r.channel == channel]
    if not selected:
        raise ValueError(f"no rows for dataset={dataset!r} channel={channel!r}")
    modes = sorted({r.mode for r in selected})

    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    for i, mode in enumerate(modes):
        points = sorted((r.snr_db, getattr(r, metric)) for r in selected if r.mode == mode)
        ax.plot(
            [p[0] for p in points],
            [p[1] for p in points],
            marker=_MARKERS[i % len(_MARKERS)],
            label=mode,
        )
    ax.set_xlabel("Channel SNR (dB)")
    ax.set_ylabel(_METRIC_LABELS[metric])
    ax.set_title(f"{dataset} / {channel}")
    ax.grid(True, alpha=0.4)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_triptych(original, received, reconstruction, out_path: Path, title: str = "") -> Path:
    """Input / received / reconstruction side by side, all in [-1, 1]."""
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.2))
    panels = (("input", original), ("received", received), ("reconstruction", reconstruction))
    for ax, (label, img) in zip(axes, panels):
        arr = img.numpy() if hasattr(img, "numpy") else img
        ax.imshow(((arr.clip(-1.0, 1.0) + 1.0) / 2.0), interpolation="nearest")
        ax.set_title(label)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
