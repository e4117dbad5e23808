"""Mel-spectrogram heatmap rendering."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_mel(mel_values: np.ndarray, out_png, hop_ms: float = 5.0, title: str | None = None):
    """Time-frequency heatmap PNG; x axis seconds, y axis mel band index."""
    mel_values = np.asarray(mel_values)
    if mel_values.ndim != 2 or mel_values.size == 0:
        raise ValueError(f"expected a non-empty [frames x bands] matrix, got {mel_values.shape}")
    duration_s = mel_values.shape[0] * hop_ms / 1000.0
    fig, ax = plt.subplots(figsize=(10, 4))
    ax.imshow(
        mel_values.T,
        origin="lower",
        aspect="auto",
        interpolation="nearest",
        extent=(0.0, duration_s, -0.5, mel_values.shape[1] - 0.5),
    )
    ax.set_xlabel("time (s)")
    ax.set_ylabel("mel band")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)


def plot_mel_container(container_path, out_png, title: str | None = None):
    from .synthesis import load_mel_container

    mel, meta = load_mel_container(container_path)
    plot_mel(mel, out_png, hop_ms=float(meta.get("hop_ms", 5.0)), title=title)
