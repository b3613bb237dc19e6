"""Report figures: training curves, metric bars and modality-attention heatmaps.

All figures go through the Agg backend with fixed metadata so repeated runs
write byte-identical PNGs.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STAGE_COLORS = {
    "CrossEntropy": "#4eb3d3",
    "WordOracle": "#7bccc4",
    "SelfCritical1": "#fdae6b",
    "SelfCritical2": "#e6550d",
}

STYLE = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "svg.hashsalt": "capfuse",
}

# drop the version/date chunks matplotlib would otherwise stamp into the file
_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)
    return path


def training_curve(log: Sequence[Mapping], path) -> Path:
    """Loss and validation CIDEr-D per epoch, background shaded by stage."""
    if not log:
        raise ValueError("empty training log")
    epochs = np.array([r["epoch"] for r in log])
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_val) = plt.subplots(2, 1, figsize=(5.0, 4.0), sharex=True)
        start = 0
        for i in range(1, len(log) + 1):
            if i == len(log) or log[i]["stage"] != log[start]["stage"]:
                color = STAGE_COLORS.get(log[start]["stage"], "#cccccc")
                for ax in (ax_loss, ax_val):
                    ax.axvspan(epochs[start] - 0.5, epochs[i - 1] + 0.5, color=color, alpha=0.25, lw=0)
                ax_loss.text(epochs[start] - 0.4, 1.0, log[start]["stage"], transform=ax_loss.get_xaxis_transform(),
                             va="bottom", fontsize=6)
                start = i
        ax_loss.plot(epochs, [r["loss"] for r in log], "o-", color="#08589e")
        ax_loss.set_ylabel("train loss")
        ax_val.plot(epochs, [r["val_cider"] for r in log], "s-", color="#e6550d")
        ax_val.set_ylabel("val CIDEr-D")
        ax_val.set_xlabel("epoch")
        fig.tight_layout()
        return _save(fig, path)


def metric_bars(blocks: Mapping[str, Mapping[str, float]], path) -> Path:
    """Grouped bars, one group per metric and one bar per run.

    CIDEr-D lives on a 0-10 scale, so it gets its own axis.
    """
    if not blocks:
        raise ValueError("no score blocks to plot")
    runs = list(blocks)
    unit = ["bleu4", "rouge_l", "meteor_exact"]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6.0, 2.8), gridspec_kw={"width_ratios": [3, 1]})
        width = 0.8 / len(runs)
        cmap = plt.get_cmap("viridis")
        for j, run in enumerate(runs):
            color = cmap(j / max(1, len(runs) - 1) * 0.85)
            xs = np.arange(len(unit)) + (j - (len(runs) - 1) / 2) * width
            ax1.bar(xs, [blocks[run].get(m, 0.0) for m in unit], width, label=run, color=color)
            ax2.bar([(j - (len(runs) - 1) / 2) * width], [blocks[run].get("cider_d", 0.0)], width, color=color)
        ax1.set_xticks(np.arange(len(unit)), unit)
        ax1.set_ylim(0, 1)
        ax1.set_ylabel("score")
        ax1.legend(loc="upper right", frameon=False)
        ax2.set_xticks([0], ["cider_d"])
        ax2.set_ylim(0, 10)
        fig.tight_layout()
        return _save(fig, path)


def attention_heatmap(weights: np.ndarray, modality_names: Sequence[str], tokens: Sequence[str],
                      path, title: str = "") -> Path:
    """Heatmap of per-step modality weights (steps x modalities)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[1] != len(modality_names):
        raise ValueError(f"weights shape {weights.shape} does not match {len(modality_names)} modalities")
    labels = list(tokens) + ["<eos>"] * (weights.shape[0] - len(tokens))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.7 * len(modality_names), 0.8 + 0.28 * len(labels)))
        im = ax.imshow(weights, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_xticks(np.arange(len(modality_names)), modality_names, rotation=30, ha="right")
        ax.set_yticks(np.arange(len(labels)), labels[:weights.shape[0]])
        ax.set_xlabel("modality")
        ax.set_ylabel("emitted word")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.08)
        fig.tight_layout()
        return _save(fig, path)
