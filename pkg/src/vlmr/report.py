"""Render run artifacts (history, metrics, attention dumps) to PNG figures.

Figures land next to the CSVs they are drawn from; everything uses the Agg
backend so reports work headless.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_history(history_csv, out_png) -> Path:
    epochs, pos, neg = [], [], []
    with open(history_csv) as fh:
        for row in csv.DictReader(fh):
            epochs.append(int(row["epoch"]))
            pos.append(float(row["mean_pos_sim"]))
            neg.append(float(row["mean_neg_sim"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, pos, label="positive pairs", color="tab:blue")
    ax.plot(epochs, neg, label="negative pairs", color="tab:red")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean similarity")
    ax.set_title("similarity separation while training")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_metrics(metrics_csv, out_png) -> Path:
    labels, values = [], []
    with open(metrics_csv) as fh:
        for row in csv.DictReader(fh):
            thr = float(row["iou_threshold"])
            label = f"{row['metric']}@{row['n']}"
            if row["metric"] in ("recall", "random_baseline"):
                label += f" IoU≥{thr:g}"
            labels.append(label)
            values.append(float(row["value"]))
    fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(labels)), 4))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("value")
    ax.set_title("retrieval metrics")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_attention(attention_csv, out_png) -> Path:
    stages: dict[str, list[float]] = {}
    order: list[str] = []
    with open(attention_csv) as fh:
        for row in csv.DictReader(fh):
            stage = row["stage"]
            if stage not in stages:
                stages[stage] = []
                order.append(stage)
            stages[stage].append(float(row["weight"]))
    width = max(len(w) for w in stages.values())
    grid = [w + [float("nan")] * (width - len(w)) for w in (stages[s] for s in order)]
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * width), 0.5 * len(order) + 2))
    im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0)
    ax.set_yticks(range(len(order)))
    ax.set_yticklabels(order, fontsize=8)
    ax.set_xlabel("element index")
    ax.set_title("attention weights by stage")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def render_run(run_dir) -> list[Path]:
    """Render a figure next to every recognized CSV in a run directory."""
    run_dir = Path(run_dir)
    written = []
    history = run_dir / "history.csv"
    if history.exists():
        written.append(plot_history(history, run_dir / "history.png"))
    metrics = run_dir / "metrics.csv"
    if metrics.exists():
        written.append(plot_metrics(metrics, run_dir / "metrics.png"))
    for csv_path in sorted(run_dir.glob("attention_*.csv")):
        written.append(plot_attention(csv_path, csv_path.with_suffix(".png")))
    return written
