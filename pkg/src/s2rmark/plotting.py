"""Static figure rendering for loss logs, histogram curves, and eval reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path) -> dict[str, list]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        cols: dict[str, list] = {name: [] for name in reader.fieldnames or []}
        for row in reader:
            for name, value in row.items():
                cols[name].append(float(value))
    return cols


def plot_loss_csv(csv_path, out_path) -> Path:
    """Render every loss column of a training log against the step axis."""
    cols = _read_csv(csv_path)
    steps = cols.pop("step")
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, values in cols.items():
        ax.plot(steps, values, label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_hist_curves(curves, out_path, label_a="set A", label_b="set B") -> Path:
    """Render the averaged per-bin frequency curves of two image sets.

    `curves` is either the dict returned by hist_compare or a CSV path with
    columns bin, freq_a, freq_b.
    """
    if isinstance(curves, (str, Path)):
        curves = _read_csv(curves)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(curves["bin"], curves["freq_a"], label=label_a, linewidth=1.0)
    ax.plot(curves["bin"], curves["freq_b"], label=label_b, linewidth=1.0)
    ax.set_xlabel("pixel intensity")
    ax.set_ylabel("average normalized frequency")
    ax.set_xlim(0, 255)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_report(report, out_path) -> Path:
    """Bar chart of mean BER / PSNR / SSIM per noise chain from a report.json."""
    if isinstance(report, (str, Path)):
        with open(report) as f:
            data = json.load(f)
        aggregates = data["aggregates"]
    else:
        aggregates = report.aggregates
    chains = list(aggregates)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.5))
    for ax, metric, label in zip(axes, ("ber_percent", "psnr_db", "ssim"),
                                 ("BER (%)", "PSNR (dB)", "SSIM")):
        means = [aggregates[c][metric]["mean"] for c in chains]
        stds = [aggregates[c][metric]["std"] for c in chains]
        ax.bar(chains, means, yerr=stds, capsize=3, color="#4878a8")
        ax.set_title(label, fontsize=10)
        ax.grid(axis="y", alpha=0.3)
    return _save(fig, out_path)


def write_hist_csv(curves: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin", "freq_a", "freq_b"])
        for b, fa, fb in zip(curves["bin"], curves["freq_a"], curves["freq_b"]):
            writer.writerow([int(b), f"{fa:.8f}", f"{fb:.8f}"])
    return path


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
