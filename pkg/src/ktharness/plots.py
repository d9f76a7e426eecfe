"""Figure rendering for reports. Figures are written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

GOLDEN = (np.sqrt(5) - 1.0) / 2.0

PARAMS = {
    "font.family": "sans-serif",
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "savefig.dpi": 200,
    "savefig.bbox": "tight",
}


def _figure(width: float = 4.0, height: float | None = None) -> Figure:
    with matplotlib.rc_context(PARAMS):
        return Figure(figsize=(width, height or width * GOLDEN))


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(PARAMS):
        fig.savefig(path)
    return path


def heatmap(matrix: np.ndarray, labels: Sequence[str], path: str | Path, title: str = "",
            diverging: bool = False, fmt: str = "{:.2f}") -> Path:
    """Annotated square heatmap; ``diverging`` centres a red/blue map on zero."""
    with matplotlib.rc_context(PARAMS):
        fig = _figure(4.2, 3.6)
        ax = fig.add_subplot()
        if diverging:
            lim = float(np.abs(matrix).max()) or 1.0
            im = ax.imshow(matrix, cmap="RdBu", vmin=-lim, vmax=lim)
        else:
            im = ax.imshow(matrix, cmap="Blues", vmin=0.0, vmax=max(1e-9, float(matrix.max())))
        ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
        ax.set_yticks(range(len(labels)), labels)
        ax.set_xlabel("to")
        ax.set_ylabel("from")
        if title:
            ax.set_title(title)
        for i in range(matrix.shape[0]):
            for j in range(matrix.shape[1]):
                ax.text(j, i, fmt.format(matrix[i, j]), ha="center", va="center", fontsize=5)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def grouped_bars(categories: Sequence[str], series: dict[str, Sequence[float]], path: str | Path,
                 ylabel: str = "", title: str = "", ylim: tuple[float, float] | None = None) -> Path:
    with matplotlib.rc_context(PARAMS):
        fig = _figure(max(3.5, 0.6 * len(categories) * max(1, len(series))))
        ax = fig.add_subplot()
        x = np.arange(len(categories))
        width = 0.8 / max(1, len(series))
        for k, (name, vals) in enumerate(series.items()):
            vals = [np.nan if v is None else v for v in vals]
            ax.bar(x + (k - (len(series) - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(x, categories, rotation=30, ha="right")
        if ylabel:
            ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if ylim:
            ax.set_ylim(*ylim)
        if len(series) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def box_by_group(values: dict[str, dict[str, Sequence[float]]], path: str | Path, title: str = "") -> Path:
    """One panel per measure, one box per group."""
    measures = list(next(iter(values.values())).keys()) if values else []
    with matplotlib.rc_context(PARAMS):
        fig = _figure(1.8 * max(1, len(measures)), 2.4)
        for k, m in enumerate(measures):
            ax = fig.add_subplot(1, len(measures), k + 1)
            groups = list(values)
            ax.boxplot([list(values[g][m]) for g in groups])
            ax.set_xticks(range(1, len(groups) + 1), groups)
            ax.set_title(m)
        if title:
            fig.suptitle(title)
        return _save(fig, path)
