"""Matplotlib renderings of training logs and evaluation summaries.

Every CSV the pipeline writes has a PNG sibling produced here; the Agg
backend keeps rendering headless and deterministic.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_training_log(rows: list[dict], path, title: str = "training"):
    """Loss terms and schedule weights over epochs, saved as a PNG."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True,
                                  height_ratios=(2, 1))
    for key, style in (("total", "-"), ("sim", "--"), ("source", "-."),
                       ("target", ":"), ("mi", "--")):
        vals = [r[key] for r in rows]
        if any(v != 0 for v in vals):
            ax.plot(epochs, vals, style, label=key)
    ax.set_ylabel("loss term")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)

    ax2.plot(epochs, [r["w3"] for r in rows], label="w3 = w4")
    ax2.plot(epochs, [r["m"] for r in rows], "--", label="momentum m")
    if any(r.get("source_acc") is not None for r in rows):
        ax2.plot(epochs, [r.get("source_acc") or 0.0 for r in rows], ":",
                 label="source acc")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("schedule")
    ax2.set_ylim(-0.05, 1.05)
    ax2.legend(loc="lower right", fontsize=8)
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_metric_summary(summary: dict[str, tuple[float, float]], path,
                        title: str = "evaluation"):
    """Grouped bars of mean P2S and CD per method variant, saved as a PNG."""
    names = list(summary)
    p2s_vals = [summary[n][0] for n in names]
    cd_vals = [summary[n][1] for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.6 * max(4, len(names)), 4))
    ax.bar(x - 0.2, p2s_vals, width=0.4, label="P2S")
    ax.bar(x + 0.2, cd_vals, width=0.4, label="CD")
    ax.set_xticks(x, names, rotation=20, ha="right")
    ax.set_ylabel("distance (unit-box units)")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
