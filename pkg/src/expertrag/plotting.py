"""Report figures (PNG, headless)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .costs import CostParams, expected_cost  # noqa: E402
from .evaluation import EvalMetrics  # noqa: E402
from .training import EpochLog  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "legend.frameon": False,
    "legend.fontsize": 8,
    "xtick.direction": "out",
    "ytick.direction": "out",
}

# PNG metadata would otherwise carry the matplotlib version
_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curve(logs: Sequence[EpochLog], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [e.epoch for e in logs]
        ax.plot(epochs, [e.loss for e in logs], color="k", label="answer loss")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        twin = ax.twinx()
        twin.plot(epochs, [e.retrieval_fraction for e in logs], color="tab:blue", ls="--", label="retrieval fraction")
        twin.set_ylim(0, 1.05)
        twin.set_ylabel("retrieval fraction", color="tab:blue")
        twin.spines["top"].set_visible(False)
        lines = ax.get_lines() + twin.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
        return _save(fig, path)


def ablation_chart(metrics: Sequence[EvalMetrics], path: str | Path, chance: float | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(metrics))
        w = 0.38
        ax.bar(x - w / 2, [m.accuracy_parametric for m in metrics], w, color="0.6", label="parametric")
        ax.bar(x + w / 2, [m.accuracy_external for m in metrics], w, color="tab:blue", label="external")
        if chance is not None:
            ax.axhline(chance, color="k", lw=0.6, ls=":", label="chance")
        ax.set_xticks(x, [m.mode.replace("_", " ") for m in metrics])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("exact-match accuracy")
        ax.legend(loc="upper right", ncol=3)
        return _save(fig, path)


def cost_curve(params: CostParams, points: Sequence[tuple[str, float, float]], path: str | Path) -> Path:
    """Predicted cost against retrieval fraction, with measured (label, f, cost) points."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        fs = np.linspace(0.0, 1.0, 101)
        ax.plot(fs, [expected_cost(params.with_f(f)) for f in fs], color="k", label="model")
        for (label, f, cost), marker in zip(points, "osD^v"):
            ax.plot([f], [cost], marker=marker, ls="none", ms=5, label=label)
        ax.set_xlabel("retrieval fraction f")
        ax.set_ylabel("multiplies per query")
        ax.set_xlim(-0.02, 1.02)
        ax.legend(loc="upper left")
        return _save(fig, path)
