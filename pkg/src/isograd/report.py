"""Training-metrics CSV emission and matplotlib figure rendering."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_COLUMNS = ("photometric", "convergence", "normal", "tv", "entropy",
                "sparsity", "total")


def write_metrics_csv(path, rows: list[dict], fieldnames):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items() if v != ""}
                for row in csv.DictReader(fh)]


def render_metrics_figure(csv_path, out_png):
    """Loss curves (log scale) plus the learning-rate/truncation schedules,
    rendered next to the delimited metrics."""
    rows = read_metrics_csv(csv_path)
    if not rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.text(0.5, 0.5, "no metrics rows", ha="center", va="center")
        ax.set_axis_off()
        fig.savefig(out_png, dpi=110)
        plt.close(fig)
        return
    iters = [r["iter"] for r in rows]
    fig, (ax_loss, ax_sched) = plt.subplots(
        2, 1, figsize=(7, 6.5), sharex=True,
        gridspec_kw={"height_ratios": [2.2, 1.0]})
    for col in LOSS_COLUMNS:
        if col in rows[0]:
            vals = [max(r[col], 1e-12) for r in rows]
            ax_loss.plot(iters, vals, label=col,
                         lw=2.0 if col == "total" else 1.1)
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("loss term")
    ax_loss.legend(fontsize=8, ncol=2, frameon=False)
    ax_loss.grid(alpha=0.3)

    if "lr_delta" in rows[0]:
        ax_sched.plot(iters, [r["lr_delta"] for r in rows], label="lr_delta")
        ax_sched.plot(iters, [r["lr_sigma"] for r in rows], label="lr_sigma")
        ax_sched.set_yscale("log")
    ax_sched.set_ylabel("learning rate")
    ax_sched.set_xlabel("iteration")
    ax_sched.grid(alpha=0.3)
    if "a" in rows[0]:
        ax_a = ax_sched.twinx()
        ax_a.plot(iters, [r["a"] for r in rows], color="crimson", ls="--",
                  label="a")
        ax_a.set_ylabel("truncation a")
    ax_sched.legend(fontsize=8, frameon=False, loc="lower left")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def render_image_preview(img, out_png, gamma: float = 2.2):
    """Matplotlib-free path lives in image_io; this renders an annotated
    preview figure (useful beside metrics in a report directory)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow((img.clip(0.0, 1.0)) ** (1.0 / gamma))
    ax.set_axis_off()
    fig.tight_layout(pad=0.1)
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
