"""Delimited report output and the matplotlib figures rendered next to it."""

from __future__ import annotations

import csv

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

PSNR_CAP_DB = 99.0


def psnr(a, b) -> float:
    """10*log10(1/MSE) on [0,1] pixels, capped at 99 dB for near-zero MSE."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def write_csv(path, header, rows):
    """RFC-4180 CSV with a header row; floats keep full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def save_history_figure(path, records, title="training loss"):
    """Loss curves for a training run; accepts either history record type."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if records and hasattr(records[0], "fidelity"):
        steps = [r.step for r in records]
        ax.plot(steps, [r.total for r in records], label="total", lw=1.0)
        ax.plot(steps, [r.fidelity for r in records], label="fidelity", lw=0.8)
        if any(r.gamma_q for r in records):
            ax.plot(steps, [r.gamma_q for r in records], label="gamma*q", lw=0.8)
        ax.set_xlabel("step")
    else:
        ax.plot([r.epoch for r in records], [r.mean_loss for r in records], lw=1.0)
        ax.set_xlabel("epoch")
    ax.set_yscale("log")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def save_score_stats_figure(path, stats):
    """Mean +/- std of predictor scores per method, as an errorbar chart.

    ``stats`` is a list of (method, mean, std) tuples in display order.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(stats))
    means = [s[1] for s in stats]
    stds = [s[2] for s in stats]
    ax.errorbar(xs, means, yerr=stds, fmt="o", capsize=5, color="tab:blue")
    ax.set_xticks(xs)
    ax.set_xticklabels([s[0] for s in stats], rotation=15, ha="right")
    ax.set_ylabel("predicted score")
    ax.set_title("score statistics by method")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
