"""Figure rendering for CLI reports.

Figures are written next to the machine-readable outputs (the JSONL step
log, the router-load CSV) so a run directory is self-describing. Uses the
Agg backend: this package never opens a display.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_SIZE = (6.0, 3.7)  # width x golden-ish height, inches
DPI = 150


def render_loss_curve(losses, path: str | os.PathLike, title: str = "training loss") -> str:
    """Per-step loss line plot; returns the written path."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=1.0, color="#1f5fa8")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (nats)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return os.fspath(path)


def render_router_load(fractions: dict[int, np.ndarray], top_k: int,
                       path: str | os.PathLike) -> str:
    """Grouped bars: per-layer selection fraction of every expert."""
    layers = sorted(fractions)
    n_experts = len(fractions[layers[0]])
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    width = 0.8 / n_experts
    xs = np.arange(len(layers))
    for e in range(n_experts):
        vals = [fractions[layer][e] for layer in layers]
        ax.bar(xs + (e - (n_experts - 1) / 2) * width, vals, width,
               label=f"expert {e}")
    ax.axhline(top_k / n_experts, color="grey", ls="--", lw=0.8,
               label="balanced load")
    ax.set_xticks(xs, [str(layer) for layer in layers])
    ax.set_xlabel("layer")
    ax.set_ylabel("selection fraction")
    ax.set_title("router load")
    ax.legend(fontsize=8, ncol=min(n_experts + 1, 5))
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return os.fspath(path)


def write_router_csv(fractions: dict[int, np.ndarray], path: str | os.PathLike) -> str:
    """Delimited per-layer expert fractions, one row per layer."""
    layers = sorted(fractions)
    n_experts = len(fractions[layers[0]])
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["layer"] + [f"expert_{e}" for e in range(n_experts)])
        for layer in layers:
            writer.writerow([layer] + [f"{v:.6f}" for v in fractions[layer]])
    return os.fspath(path)
