"""Figures written next to report tables: per-arm metric bars and video filmstrips."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalsuite import METRICS, MetricsReport  # noqa: E402

# fixed metadata so identical data gives identical PNG bytes
_PNG_META = {"Software": None}


def metric_bars(reports: list[MetricsReport], path, metrics=METRICS) -> None:
    arms = [r.arm for r in reports]
    vals = np.array([[r.aggregates[m] for m in metrics] for r in reports])
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(metrics), 3.2), dpi=100)
    width = 0.8 / max(1, len(arms))
    x = np.arange(len(metrics))
    for i, arm in enumerate(arms):
        ax.bar(x + (i - (len(arms) - 1) / 2) * width, vals[i], width, label=arm)
    ax.set_xticks(x, metrics)
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean score")
    ax.legend(fontsize=8, ncol=min(3, len(arms)), loc="upper right")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def filmstrip(video: np.ndarray, path, title: str | None = None) -> None:
    """Frames of a ``[F, 3, H, W]`` video in [-1, 1] side by side."""
    f = video.shape[0]
    fig, axes = plt.subplots(1, f, figsize=(1.1 * f, 1.4 if title else 1.2), dpi=100)
    axes = np.atleast_1d(axes)
    for k, ax in enumerate(axes):
        ax.imshow(np.clip((video[k].transpose(1, 2, 0) + 1) / 2, 0, 1), interpolation="nearest")
        ax.set_axis_off()
    if title:
        fig.suptitle(title, fontsize=7)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
