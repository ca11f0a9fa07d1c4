"""Figures written next to the CSV outputs (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _smooth(y: np.ndarray, width: int) -> np.ndarray:
    if width <= 1 or len(y) < width:
        return y
    kernel = np.ones(width) / width
    return np.convolve(y, kernel, mode="valid")


def plot_training_log(csv_path: Path, out_path: Path) -> Path:
    from .trainer import read_log

    rows = read_log(csv_path)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    if rows:
        steps = np.array([r["step"] for r in rows])
        width = max(1, len(rows) // 50)
        for key in ("loss_total", "loss_L1", "loss_perc", "loss_style", "loss_latent"):
            y = _smooth(np.array([r[key] for r in rows]), width)
            if np.any(y > 0):
                axes[0].plot(steps[len(steps) - len(y):], y, label=key[5:])
        for key in ("loss_GAN_D", "loss_GAN_G"):
            y = _smooth(np.array([r[key] for r in rows]), width)
            axes[1].plot(steps[len(steps) - len(y):], y, label=key[5:])
        axes[0].set_yscale("log")
    axes[0].set_title("generator terms")
    axes[1].set_title("adversarial terms")
    for ax in axes:
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=90)
    plt.close(fig)
    return Path(out_path)


def plot_eval_report(frame_rows: Sequence[Dict], out_path: Path) -> Path:
    """Per-frame PSNR and SSIM, one line per sequence."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    by_seq: Dict[str, list] = {}
    for r in frame_rows:
        by_seq.setdefault(r["sequence"], []).append(r)
    for name, rows in sorted(by_seq.items()):
        idx = [r["frame"] for r in rows]
        axes[0].plot(idx, [r["psnr"] for r in rows], marker=".", label=name)
        axes[1].plot(idx, [r["ssim"] for r in rows], marker=".", label=name)
    axes[0].set_ylabel("PSNR (dB)")
    axes[1].set_ylabel("SSIM")
    for ax in axes:
        ax.set_xlabel("frame")
        if len(by_seq) <= 8:
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=90)
    plt.close(fig)
    return Path(out_path)


def plot_frame_strip(frames: Sequence[np.ndarray], out_path: Path, titles: Sequence[str] = ()) -> Path:
    """Side-by-side thumbnails of H×W×3 frames."""
    n = len(frames)
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.9), squeeze=False)
    for i, (ax, fr) in enumerate(zip(axes[0], frames)):
        ax.imshow(np.clip(fr, 0, 1), interpolation="nearest")
        ax.set_axis_off()
        if i < len(titles):
            ax.set_title(titles[i], fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=90)
    plt.close(fig)
    return Path(out_path)
