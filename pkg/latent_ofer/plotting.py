"""
Report figures (PNG, non-interactive backend)
"""

import os
from typing import Dict, List, Sequence

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

PLOT_STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (5.0, 3.2),
    "savefig.dpi": 120,
}


def new():
    with mpl.rc_context(PLOT_STYLE):
        return plt.subplots()


def save(fig, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with mpl.rc_context(PLOT_STYLE):
        fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_occlusion_sweep(sweep: Dict[str, Dict[str, float]], path: str) -> str:
    """
    Accuracy against occlusion proportion, one curve per protocol

    Args:
        sweep: curve name -> {proportion (as str): accuracy}
    """
    fig, ax = new()
    markers = ["o", "s", "^", "D"]
    for k, (name, curve) in enumerate(sorted(sweep.items())):
        points = sorted((float(p), acc) for p, acc in curve.items())
        ax.plot([p for p, _ in points], [a for _, a in points], marker=markers[k % len(markers)], label=name)
    ax.set_xlabel("occluded proportion")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return save(fig, path)


def plot_ablation(rows: List[Dict], path: str) -> str:
    """Grouped bars: fusion variant x reconstruction on/off"""
    fusions = []
    for row in rows:
        if row["fusion"] not in fusions:
            fusions.append(row["fusion"])
    width = 0.38
    fig, ax = new()
    for offset, enabled in ((-width / 2, False), (width / 2, True)):
        accs = {row["fusion"]: row["accuracy"] for row in rows if row["reconstruction"] == enabled}
        xs = [i + offset for i in range(len(fusions))]
        label = "with reconstruction" if enabled else "without reconstruction"
        ax.bar(xs, [accs.get(f, 0.0) for f in fusions], width=width, label=label)
    ax.set_xticks(range(len(fusions)))
    ax.set_xticklabels(fusions, rotation=20)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.legend()
    fig.tight_layout()
    return save(fig, path)


def plot_training_curve(history: Sequence[Dict[str, float]], keys: Sequence[str], path: str, title: str = "") -> str:
    """Per-epoch values of the given history keys"""
    fig, ax = new()
    epochs = range(1, len(history) + 1)
    for key in keys:
        ax.plot(epochs, [h[key] for h in history], label=key)
    ax.set_xlabel("epoch")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return save(fig, path)
