"""SVG figures: shape functions with visit density, reward trajectories, importances.

matplotlib is imported lazily and forced onto the non-interactive Agg backend.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from echelon.interpret import AggregateImportance, FeatureImportanceReport, ShapeFunctionTable

logger = logging.getLogger(__name__)


def _pyplot():
    try:
        import matplotlib  # type: ignore

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt  # type: ignore
    except Exception as e:  # pragma: no cover
        raise ImportError(f"Plotting requires the optional dependency 'matplotlib'. ({e})") from e
    plt.rcParams["svg.hashsalt"] = "echelon"
    return plt


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def plot_shape_functions(
    table: "ShapeFunctionTable",
    task: int,
    features: Sequence[str] | None = None,
    path: str | Path | None = None,
    *,
    ncols: int = 3,
):
    """One panel per feature: contribution curve over a shaded visit-density histogram."""

    plt = _pyplot()
    names = list(features) if features is not None else list(table.feature_names)
    idx = [table.feature_names.index(n) for n in names]
    ncols = max(1, min(ncols, len(idx)))
    nrows = int(np.ceil(len(idx) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 3 * nrows), squeeze=False)
    for ax in axes.ravel()[len(idx):]:
        ax.set_visible(False)
    for ax, i, name in zip(axes.ravel(), idx, names):
        ax.plot(table.grids[i], table.contributions[task, i], color="tab:blue", lw=1.5)
        ax.set_title(name)
        ax.set_xlabel("feature value")
        ax.set_ylabel(f"contribution to {table.task_names[task]}")
        counts = table.hist_counts[i]
        if counts.sum() > 0:
            density = ax.twinx()
            edges = table.hist_edges[i]
            density.fill_between(
                edges[:-1], counts / counts.max(), step="post", alpha=0.2, color="gray"
            )
            density.set_ylim(0, 1.05)
            density.set_yticks([])
    fig.tight_layout()
    if path is not None:
        _save(fig, path)
        plt.close(fig)
    return fig


def plot_reward_trajectories(
    curves: Mapping[str, np.ndarray],
    path: str | Path | None = None,
    *,
    disruption_start: int | None = None,
    title: str = "Per-step reward (IQM over rollouts)",
):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for label, curve in curves.items():
        ax.plot(np.arange(len(curve)), curve, label=label, lw=1.2)
    if disruption_start is not None:
        ax.axvline(disruption_start, color="red", ls="--", lw=1, label="disruption")
    ax.axhline(0.0, color="black", lw=0.5)
    ax.set_xlabel("step")
    ax.set_ylabel("reward")
    ax.set_title(title)
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    if path is not None:
        _save(fig, path)
        plt.close(fig)
    return fig


def plot_feature_importance(
    report: "FeatureImportanceReport | AggregateImportance",
    path: str | Path | None = None,
    *,
    top: int | None = None,
):
    """Bar chart of importances, one panel per task (error bars for aggregated reports)."""

    plt = _pyplot()
    values = getattr(report, "importance", None)
    errors = None
    if values is None:
        values, errors = report.median, report.std
    n_tasks = len(report.task_names)
    fig, axes = plt.subplots(n_tasks, 1, figsize=(10, 2.8 * n_tasks), squeeze=False)
    for t, ax in enumerate(axes[:, 0]):
        order = np.argsort(-values[t], kind="stable")
        if top is not None:
            order = order[:top]
        ax.bar(
            np.arange(len(order)),
            values[t][order],
            yerr=None if errors is None else errors[t][order],
            color="tab:green",
        )
        ax.set_xticks(np.arange(len(order)))
        labels = [report.feature_names[i] for i in order]
        ax.set_xticklabels(labels, rotation=60, fontsize="x-small")
        ax.set_ylabel(f"importance ({report.task_names[t]})")
    fig.tight_layout()
    if path is not None:
        _save(fig, path)
        plt.close(fig)
    return fig


def plot_temporal_stability(
    rows: Mapping[str, Sequence[Mapping[str, float]]], path: str | Path | None = None
):
    """IQM with confidence band versus horizon, one line per label."""

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, table in rows.items():
        h = np.array([r["horizon"] for r in table], dtype=float)
        mid = np.array([r["iqm"] for r in table], dtype=float)
        lo = np.array([r["ci_lo"] for r in table], dtype=float)
        hi = np.array([r["ci_hi"] for r in table], dtype=float)
        ax.plot(h, mid, marker="o", label=label)
        ax.fill_between(h, lo, hi, alpha=0.2)
    ax.axhline(0.0, color="black", lw=0.5)
    ax.set_xlabel("episode length")
    ax.set_ylabel("IQM return")
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    if path is not None:
        _save(fig, path)
        plt.close(fig)
    return fig


def trajectories_to_curve(frame) -> np.ndarray:
    """Per-step IQM from a trajectories CSV frame (columns seed, rollout, step, reward)."""

    from echelon.evalstats import iqm

    wide = frame.pivot_table(index=["seed", "rollout"], columns="step", values="reward")
    return iqm(wide.to_numpy(dtype=np.float64), axis=0)
