"""Bar charts for evaluation reports.

Figures are rendered off-screen (Agg) and saved without timestamps or
software metadata, so the same numbers produce the same PNG bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from hive_retrieval.evaluation import ConfigRow, DeltaRow, DomainAggregate  # noqa: E402

COLORS = ["#08589e", "#4eb3d3", "#7bccc4", "#a8ddb5", "#2b8cbe"]
HIGHLIGHT = "#d95f0e"
PARAMS = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 9,
    "font.size": 8,
    "font.family": "sans-serif",
    "font.sans-serif": ["DejaVu Sans"],
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 150,
}
# Strip the metadata that would otherwise make PNGs differ between runs/versions.
_PNG_METADATA = {"Software": None}


def _figure(n_bars: int):
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * n_bars + 1.5), 3.2))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(PARAMS):
        fig.tight_layout()
        fig.savefig(path, format="png", metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def _label_bars(ax, bars, values: Sequence[float], fmt: str = "{:.1f}") -> None:
    for bar, v in zip(bars, values):
        y = bar.get_height()
        ax.annotate(fmt.format(v), (bar.get_x() + bar.get_width() / 2, y),
                    xytext=(0, 2 if y >= 0 else -9), textcoords="offset points",
                    ha="center", fontsize=7)


def config_bars(rows: Sequence[ConfigRow], k: int, path, title: str = "",
                base_ndcg: float | None = None, labels: Sequence[str] | None = None,
                highlight: str | None = None, xlabel: str = "") -> Path:
    """nDCG@k per configuration, with the base level as a dashed line."""
    fig, ax = _figure(len(rows))
    values = [100 * r.ndcg for r in rows]
    labels = list(labels) if labels is not None else [r.config_name for r in rows]
    colors = [HIGHLIGHT if lab == highlight else COLORS[0] for lab in labels]
    bars = ax.bar(range(len(rows)), values, color=colors, width=0.6)
    _label_bars(ax, bars, values)
    if base_ndcg is not None:
        ax.axhline(100 * base_ndcg, color="0.4", linestyle="--", linewidth=0.8, label="base")
        ax.legend(frameon=False, loc="upper left")
    ax.set_xticks(range(len(rows)), labels)
    if xlabel:
        ax.set_xlabel(xlabel)
    ax.set_ylabel(f"nDCG@{k} (x100)")
    ax.set_ylim(0, max(values + [100 * (base_ndcg or 0), 1.0]) * 1.15)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def domain_bars(domains: Sequence[DomainAggregate], overall: DomainAggregate | None, k: int,
                path, title: str = "") -> Path:
    rows = list(domains) + ([overall] if overall is not None else [])
    fig, ax = _figure(len(rows))
    values = [100 * d.mean_ndcg for d in rows]
    colors = [HIGHLIGHT if overall is not None and d is overall else COLORS[0] for d in rows]
    bars = ax.bar(range(len(rows)), values, color=colors, width=0.6)
    _label_bars(ax, bars, values)
    ax.set_xticks(range(len(rows)), [f"{d.domain}\n(n={d.query_count})" for d in rows])
    ax.set_ylabel(f"nDCG@{k} (x100)")
    ax.set_ylim(0, max(values + [1.0]) * 1.15)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def delta_bars(rows: Sequence[DeltaRow], k: int, path, title: str = "") -> Path:
    fig, ax = _figure(len(rows))
    values = [100 * r.delta for r in rows]
    colors = [COLORS[0] if v >= 0 else HIGHLIGHT for v in values]
    bars = ax.bar(range(len(rows)), values, color=colors, width=0.6)
    _label_bars(ax, bars, values, "{:+.1f}")
    ax.axhline(0, color="0.3", linewidth=0.8)
    ax.set_xticks(range(len(rows)), [r.domain for r in rows])
    ax.set_ylabel(f"delta nDCG@{k} (points)")
    span = max([abs(v) for v in values] + [1.0]) * 1.25
    ax.set_ylim(-span, span)
    if title:
        ax.set_title(title)
    return _save(fig, path)
