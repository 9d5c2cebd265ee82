"""Report figures: SVG line charts rendered next to the delimited output.

Figures carry no embedded date metadata so reruns with identical inputs
produce byte-identical files (needed for content-addressed manifests).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

# Stable element ids + no date metadata: byte-identical SVGs across reruns.
plt.rcParams["svg.hashsalt"] = "metaunlearn"


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_relearn_curves(series: dict[str, tuple[list, list]], path) -> None:
    """Forget-concept score against attack step, one line per labeled run.

    ``series`` maps label -> (steps, scores).
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(series):
        steps, scores = series[label]
        ax.plot(steps, scores, marker="o", label=label)
    ax.set_xlabel("attack step")
    ax.set_ylabel("forget-concept score (%)")
    ax.set_ylim(-2, 102)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_alignment_series(steps, values, slope: float, intercept: float, path) -> None:
    """Tracked gradient inner-product series with its regression line."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, values, lw=0.8, alpha=0.7, label="per-step value")
    xs = [min(steps), max(steps)]
    ax.plot(xs, [slope * x + intercept for x in xs], "r--", label=f"trend (slope {slope:.2e})")
    ax.set_xlabel("outer step")
    ax.set_ylabel("normalized gradient inner product")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
