"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import DistributionRow, MetricsReport  # noqa: E402

# Fixed metadata keeps PNG bytes identical across reruns.
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_distribution(rows: Sequence[DistributionRow], path: str | Path, title: str = "") -> Path:
    labels = [r.type.removeprefix("click:") for r in rows]
    x = np.arange(len(rows))
    w = 0.28
    fig, ax = plt.subplots(figsize=(11, 4))
    ax.bar(x - w, [r.gold for r in rows], w, label="gold")
    ax.bar(x, [r.pred for r in rows], w, label="predicted")
    ax.bar(x + w, [r.correct for r in rows], w, label="exact match")
    ax.set_xticks(x, labels, rotation=45, ha="right")
    ax.set_ylabel("steps")
    ax.set_title(title or "fine-grained action distribution")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_training(log: Sequence[Mapping], evals: Sequence[Mapping], path: str | Path) -> Path:
    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4))
    for phase, color in (("sft", "tab:blue"), ("rl", "tab:red")):
        rows = [r for r in log if r["phase"] == phase]
        if rows:
            left.plot(np.arange(len(rows)), [r["loss"] for r in rows], color=color, label=f"{phase} loss")
    rl = [r for r in log if r["phase"] == "rl"]
    if rl:
        twin = left.twinx()
        twin.plot(np.arange(len(rl)), [r["mean_reward"] for r in rl], color="tab:gray", alpha=0.6, label="rl mean reward")
        twin.set_ylabel("mean reward")
    left.set_xlabel("batch")
    left.set_ylabel("loss")
    if left.get_legend_handles_labels()[0]:
        left.legend(loc="upper right")
    if evals:
        steps = np.arange(1, len(evals) + 1)
        for key in ("next_action_accuracy", "action_type_macro_f1", "fine_grained_accuracy", "session_outcome_weighted_f1"):
            right.plot(steps, [e[key] for e in evals], marker="o", label=key)
        right.set_xticks(steps, [f"{e['phase']}{e['epoch']}" for e in evals])
        right.set_ylim(0, 1)
        right.legend(fontsize=7)
    right.set_title("held-out metrics per epoch")
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(matrix: Mapping[tuple[str, str], MetricsReport], path: str | Path, metric: str = "next_action_accuracy") -> Path:
    variants = list(dict.fromkeys(v for v, _ in matrix))
    regimes = list(dict.fromkeys(r for _, r in matrix))
    grid = np.full((len(variants), len(regimes)), np.nan)
    for (v, r), rep in matrix.items():
        grid[variants.index(v), regimes.index(r)] = rep.headline()[metric]
    fig, ax = plt.subplots(figsize=(1.8 * len(regimes) + 3, 0.6 * len(variants) + 2))
    im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(regimes)), regimes)
    ax.set_yticks(range(len(variants)), variants)
    for i in range(len(variants)):
        for j in range(len(regimes)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", color="white")
    ax.set_title(metric)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)
