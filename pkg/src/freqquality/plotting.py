"""PNG figures written next to the CSV/JSON outputs.

Uses the object-oriented matplotlib API with the Agg canvas, so nothing
here touches pyplot state or needs a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

F_NOM = 50.0
_STYLE = {"linewidth": 0.9}


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def frequency_figure(series: dict[str, tuple[np.ndarray, np.ndarray]], path: str | Path,
                     band: float | None = None, title: str = "") -> Path:
    """CoI frequency vs time for one or more labelled runs.

    ``series`` maps a label to ``(t, f_hz)``. ``band`` draws the standard
    frequency range as dashed lines.
    """
    fig = Figure(figsize=(7.0, 3.4))
    ax = fig.add_subplot()
    for label, (t, f) in series.items():
        ax.plot(t, f, label=label, **_STYLE)
    if band is not None:
        for y in (F_NOM - band, F_NOM + band):
            ax.axhline(y, color="0.4", linestyle="--", linewidth=0.7)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency (Hz)")
    ax.set_xlim(min(t[0] for t, _ in series.values()), max(t[-1] for t, _ in series.values()))
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def histogram_figure(series: dict[str, np.ndarray], path: str | Path, bins: int = 60) -> Path:
    """Distribution of frequency deviation for each labelled run."""
    fig = Figure(figsize=(5.0, 3.4))
    ax = fig.add_subplot()
    lo = min(float(np.min(f)) for f in series.values()) - F_NOM
    hi = max(float(np.max(f)) for f in series.values()) - F_NOM
    edges = np.linspace(lo, hi, bins + 1)
    for label, f in series.items():
        ax.hist(f - F_NOM, bins=edges, histtype="step", density=True, label=label)
    ax.set_xlabel("frequency deviation (Hz)")
    ax.set_ylabel("density")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def sweep_figure(values, sigmas, param: str, path: str | Path) -> Path:
    """Standard deviation of frequency against a swept parameter."""
    fig = Figure(figsize=(5.0, 3.4))
    ax = fig.add_subplot()
    ax.plot(values, sigmas, marker="o", **_STYLE)
    ax.set_xlabel(param)
    ax.set_ylabel("std of frequency (Hz)")
    ax.grid(alpha=0.3)
    return _save(fig, path)
