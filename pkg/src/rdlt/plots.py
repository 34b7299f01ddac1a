"""Figure rendering for the report path.

A single entry point draws the singular spectrum of one layer as a
scatter-with-line figure and writes it next to the delimited output.
SVG keeps the artifacts text-diffable; nothing interactive."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_spectrum_svg(singular_values, layer_index: int, path) -> None:
    values = np.asarray(singular_values, dtype=float)
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    index = np.arange(1, values.size + 1)
    ax.plot(index, values, color="tab:blue", lw=0.8, alpha=0.6, zorder=1)
    ax.scatter(index, values, s=18, color="tab:blue", zorder=2)
    ax.set_xlabel("index $i$")
    ax.set_ylabel(r"$\varsigma_i$")
    ax.set_title(f"layer {layer_index} singular values")
    if values.size and values.min() > 0 and values.max() / values.min() > 50:
        ax.set_yscale("log")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
