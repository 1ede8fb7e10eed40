"""Report figures rendered to PNG files (Agg backend, no display needed)."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss_history(history: Sequence[dict], path: str | Path) -> Path:
    """Per-epoch train/eval curves for every loss component present."""
    comps = sorted({k.split("_", 1)[1] for row in history for k in row if k.startswith(("train_", "eval_"))})
    fig, ax = plt.subplots(figsize=(6, 4))
    for comp in comps:
        for split, style in (("train", "-"), ("eval", "--")):
            pts = [(r["epoch"], r[f"{split}_{comp}"]) for r in history
                   if f"{split}_{comp}" in r and np.isfinite(r[f"{split}_{comp}"])]
            if pts:
                x, y = zip(*pts)
                ax.plot(x, y, style, marker=".", label=f"{split} {comp}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    ax.set_title("pre-training loss")
    return _save(fig, path)


def plot_ratio_sweep(rows: Sequence[dict], path: str | Path, metric: str = "auc") -> Path:
    """Mean metric per training ratio with a one-std band across seeds."""
    by_ratio = defaultdict(list)
    for r in rows:
        by_ratio[float(r["ratio"])].append(float(r[metric]))
    ratios = sorted(by_ratio)
    mean = np.array([np.mean(by_ratio[r]) for r in ratios])
    std = np.array([np.std(by_ratio[r]) for r in ratios])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ratios, mean, marker="o")
    ax.fill_between(ratios, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel("training ratio")
    ax.set_ylabel(metric.upper())
    ax.set_title(f"{rows[0]['task'] if rows else ''} {metric} vs training ratio")
    return _save(fig, path)


def plot_attention(record: dict, path: str | Path) -> Path:
    """Bar chart of one exported cross-attention row over its source tokens."""
    toks, w = record["source_tokens"], record["weights"]
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(toks)), 3))
    ax.bar(range(len(w)), w)
    ax.set_xticks(range(len(toks)))
    ax.set_xticklabels(toks, rotation=90, fontsize=7)
    ax.set_ylabel("weight")
    ax.set_title(f"{record['visit_id']} {record['direction']}", fontsize=9)
    return _save(fig, path)


def plot_metric_summary(summaries: dict[str, dict], path: str | Path) -> Path:
    """Grouped bars of mean AUC/F1/accuracy with std whiskers, one group per run label."""
    labels = list(summaries)
    metrics = ("auc", "f1", "accuracy")
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(5, 1.5 * len(labels)), 4))
    for i, m in enumerate(metrics):
        ax.bar(x + (i - 1) * 0.25, [summaries[l]["mean"][m] for l in labels], 0.25,
               yerr=[summaries[l]["std"][m] for l in labels], label=m, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    return _save(fig, path)
