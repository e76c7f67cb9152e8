"""Shape functions, feature importance and lookup-table policies for NAM checkpoints.

Everything here is expressed in ORIGINAL units: feature axes are inventories
and order quantities, contributions are order quantities. For task ``t``::

    mean_t(x) = bias_t + sum_i contribution_{t,i}(x_i)

where ``bias_t = beta_t * act_scale_t + act_offset_t`` and
``contribution_{t,i} = act_scale_t * f_{t,i}(standardized x_i)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from echelon import seeding
from echelon.env import SupplyChainConfig, run_episode
from echelon.errors import ContractError, FormatError
from echelon.netcore import as_tensor
from echelon.policy import PolicyCheckpoint, feature_names, task_names

logger = logging.getLogger(__name__)


def _require_nam(checkpoint: PolicyCheckpoint) -> None:
    if checkpoint.kind != "nam":
        raise ContractError(
            f"interpretation requires a NAM checkpoint, got a '{checkpoint.kind}' policy"
        )


def _require_states(states: np.ndarray, width: int) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ContractError("state set is empty")
    if states.shape[1] != width:
        raise ContractError(f"states have {states.shape[1]} features, expected {width}")
    return states


def collect_states(
    checkpoint: PolicyCheckpoint, env_config: SupplyChainConfig, num_rollouts: int, seed: int
) -> np.ndarray:
    """Observations visited by deterministic rollouts; shape ``(num_rollouts * horizon, N)``."""

    if num_rollouts < 1:
        raise ContractError(f"num_rollouts must be >= 1, got {num_rollouts}")
    chunks = [
        run_episode(checkpoint, env_config, seeding.stream(seed, seeding.INTERPRET, r)).observations
        for r in range(num_rollouts)
    ]
    return np.concatenate(chunks, axis=0)


@dataclass
class ShapeFunctionTable:
    feature_names: list[str]
    task_names: list[str]
    grids: np.ndarray  # (N, K), original feature units
    contributions: np.ndarray  # (T, N, K), original action units
    bias: np.ndarray  # (T,), original action units
    hist_edges: np.ndarray  # (N, bins + 1)
    hist_counts: np.ndarray  # (N, bins)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.grids = np.asarray(self.grids, dtype=np.float64)
        self.contributions = np.asarray(self.contributions, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.hist_edges = np.asarray(self.hist_edges, dtype=np.float64)
        self.hist_counts = np.asarray(self.hist_counts, dtype=np.int64)
        n, t = len(self.feature_names), len(self.task_names)
        if self.grids.ndim != 2 or self.grids.shape[0] != n or self.grids.shape[1] < 2:
            raise FormatError(f"grids must have shape ({n}, K>=2), got {self.grids.shape}")
        k = self.grids.shape[1]
        if self.contributions.shape != (t, n, k):
            got = self.contributions.shape
            raise FormatError(f"contributions must have shape {(t, n, k)}, got {got}")
        if self.bias.shape != (t,):
            raise FormatError(f"bias must have shape ({t},), got {self.bias.shape}")
        if np.any(np.diff(self.grids, axis=1) <= 0):
            raise FormatError("every grid must be strictly increasing")
        if not all(np.all(np.isfinite(a)) for a in (self.grids, self.contributions, self.bias)):
            raise FormatError("shape-function table contains non-finite values")
        bins = self.hist_counts.shape[1] if self.hist_counts.ndim == 2 else -1
        if bins < 0 or self.hist_edges.shape != (n, bins + 1):
            raise FormatError("histogram edges and counts do not line up")
        if np.any(self.hist_counts < 0):
            raise FormatError("histogram counts must be >= 0")

    @property
    def grid_points(self) -> int:
        return int(self.grids.shape[1])

    def contribution(self, t: int, i: int, x: Any) -> np.ndarray:
        """Piecewise-linear contribution of feature ``i`` to task ``t``, clamped at grid ends."""

        return np.interp(x, self.grids[i], self.contributions[t, i])

    def reconstruct(self, states: np.ndarray) -> np.ndarray:
        """Action means (original units) from the table alone; ``(M, N) -> (M, T)``."""

        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        out = np.tile(self.bias, (states.shape[0], 1))
        for t in range(len(self.task_names)):
            for i in range(len(self.feature_names)):
                out[:, t] += self.contribution(t, i, states[:, i])
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature_names": list(self.feature_names),
            "task_names": list(self.task_names),
            "grids": self.grids.tolist(),
            "contributions": self.contributions.tolist(),
            "bias": self.bias.tolist(),
            "hist_edges": self.hist_edges.tolist(),
            "hist_counts": self.hist_counts.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ShapeFunctionTable":
        try:
            return cls(
                feature_names=list(d["feature_names"]),
                task_names=list(d["task_names"]),
                grids=d["grids"],
                contributions=d["contributions"],
                bias=d["bias"],
                hist_edges=d["hist_edges"],
                hist_counts=d["hist_counts"],
                metadata=dict(d.get("metadata") or {}),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"Malformed shape-function table: {e}") from e

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        path.write_text(text, encoding="utf-8")
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "ShapeFunctionTable":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Shape-function bundle not found: {path}")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"Shape-function bundle is not valid JSON: {e} (file: {path})") from e
        return cls.from_dict(d)

    def write_csv(self, directory: str | Path) -> list[Path]:
        """Per-task ``<task>.csv`` shape tables plus ``histograms.csv`` and ``bias.csv``."""

        import pandas as pd  # type: ignore

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        k = self.grid_points
        written = []
        for t, task in enumerate(self.task_names):
            frame = pd.DataFrame(
                {
                    "feature": np.repeat(self.feature_names, k),
                    "x": self.grids.ravel(),
                    "contribution": self.contributions[t].ravel(),
                }
            )
            path = directory / f"{task}.csv"
            frame.to_csv(path, index=False)
            written.append(path)
        bins = self.hist_counts.shape[1]
        hist = pd.DataFrame(
            {
                "feature": np.repeat(self.feature_names, bins),
                "bin_lo": self.hist_edges[:, :-1].ravel(),
                "bin_hi": self.hist_edges[:, 1:].ravel(),
                "count": self.hist_counts.ravel(),
            }
        )
        hist.to_csv(directory / "histograms.csv", index=False)
        bias = pd.DataFrame({"task": self.task_names, "bias": self.bias})
        bias.to_csv(directory / "bias.csv", index=False)
        written += [directory / "histograms.csv", directory / "bias.csv"]
        return written

    @classmethod
    def read_csv(
        cls, directory: str | Path, metadata: dict[str, Any] | None = None
    ) -> "ShapeFunctionTable":
        import pandas as pd  # type: ignore

        directory = Path(directory)
        bias_path = directory / "bias.csv"
        hist_path = directory / "histograms.csv"
        for p in (bias_path, hist_path):
            if not p.exists():
                raise FileNotFoundError(f"Shape-function CSV not found: {p}")
        try:
            bias_df = pd.read_csv(bias_path)
            tasks = [str(t) for t in bias_df["task"]]
            hist = pd.read_csv(hist_path)
            features = list(dict.fromkeys(str(f) for f in hist["feature"]))
            grids, contribs = None, []
            for task in tasks:
                path = directory / f"{task}.csv"
                if not path.exists():
                    raise FileNotFoundError(f"Shape-function CSV not found: {path}")
                df = pd.read_csv(path)
                by_feature = {name: g for name, g in df.groupby("feature", sort=False)}
                missing = [f for f in features if f not in by_feature]
                if missing:
                    raise FormatError(f"{path} lacks features {missing}")
                columns = {
                    name: np.stack(
                        [by_feature[f][name].to_numpy(dtype=np.float64) for f in features]
                    )
                    for name in ("x", "contribution")
                }
                grids = columns["x"] if grids is None else grids
                contribs.append(columns["contribution"])
            hist_by = {name: g for name, g in hist.groupby("feature", sort=False)}
            counts = np.stack([hist_by[f]["count"].to_numpy() for f in features])
            edges = np.stack(
                [
                    np.append(hist_by[f]["bin_lo"].to_numpy(), hist_by[f]["bin_hi"].to_numpy()[-1])
                    for f in features
                ]
            )
        except (KeyError, ValueError) as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"Malformed shape-function CSV in {directory}: {e}") from e
        return cls(
            feature_names=features,
            task_names=tasks,
            grids=grids,
            contributions=np.stack(contribs),
            bias=bias_df["bias"].to_numpy(dtype=np.float64),
            hist_edges=edges,
            hist_counts=counts,
            metadata=dict(metadata or {}),
        )


def _feature_ranges(states: np.ndarray, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    lo = states.min(axis=0)
    hi = states.max(axis=0)
    flat = lo == hi
    if np.any(flat):
        logger.warning(
            "Widening degenerate range by +/-0.5 for %d feature(s): %s",
            int(flat.sum()),
            ", ".join(n for n, f in zip(names, flat) if f),
        )
        lo = np.where(flat, lo - 0.5, lo)
        hi = np.where(flat, hi + 0.5, hi)
    return lo, hi


def trace_shape_functions(
    checkpoint: PolicyCheckpoint, states: np.ndarray, grid_points: int = 256, bins: int = 32
) -> ShapeFunctionTable:
    """Evaluate every ``f_{t,i}`` on ``grid_points`` equispaced values over the observed range."""

    _require_nam(checkpoint)
    if grid_points < 2:
        raise ContractError(f"grid_points must be >= 2, got {grid_points}")
    cfg = checkpoint.env_config
    names = feature_names(cfg)
    states = _require_states(states, len(names))
    std = checkpoint.standardizer
    actor = checkpoint.actor
    lo, hi = _feature_ranges(states, names)
    grids = np.linspace(lo, hi, grid_points, axis=1)  # (N, K)
    z = (grids - std.obs_offset[:, None]) / std.obs_scale[:, None]

    n_tasks = actor.num_tasks
    contributions = np.zeros((n_tasks, len(names), grid_points), dtype=np.float64)
    with torch.no_grad():
        for i in range(len(names)):
            zi = as_tensor(z[i])
            for t in range(n_tasks):
                values = actor.feature_contribution(t, i, zi).numpy()
                contributions[t, i] = values * std.act_scale[t]
        beta = actor.task_bias.detach().numpy()
    bias = beta * std.act_scale + std.act_offset

    counts = np.zeros((len(names), bins), dtype=np.int64)
    edges = np.zeros((len(names), bins + 1), dtype=np.float64)
    for i in range(len(names)):
        counts[i], edges[i] = np.histogram(states[:, i], bins=bins, range=(lo[i], hi[i]))

    return ShapeFunctionTable(
        feature_names=names,
        task_names=task_names(cfg),
        grids=grids,
        contributions=contributions,
        bias=bias,
        hist_edges=edges,
        hist_counts=counts,
        metadata={
            "checkpoint": checkpoint.metadata.get("checkpoint_id", ""),
            "seed": checkpoint.metadata.get("seed"),
            "grid_points": grid_points,
            "bins": bins,
            "num_states": int(states.shape[0]),
            "capacities": list(cfg.capacities),
            "action_offset": std.act_offset.tolist(),
            "action_scale": std.act_scale.tolist(),
        },
    )


def centered_importance(contributions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(M, T, N)`` contributions -> (mean |c - mean c|, mean c), each ``(T, N)``."""

    contributions = np.asarray(contributions, dtype=np.float64)
    if contributions.ndim != 3 or contributions.shape[0] == 0:
        raise ContractError("state set is empty")
    means = contributions.mean(axis=0)
    return np.abs(contributions - means).mean(axis=0), means


@dataclass
class FeatureImportanceReport:
    importance: np.ndarray  # (T, N), >= 0, original action units
    feature_names: list[str]
    task_names: list[str]
    centered_bias: np.ndarray  # bias with the subtracted contribution means folded in
    num_states: int
    state_set: dict[str, Any] = field(default_factory=dict)

    def frame(self):
        import pandas as pd  # type: ignore

        index = pd.Index(self.task_names, name="task")
        return pd.DataFrame(self.importance, index=index, columns=self.feature_names)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(path)
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "FeatureImportanceReport":
        import pandas as pd  # type: ignore

        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Feature-importance CSV not found: {path}")
        df = pd.read_csv(path, index_col=0)
        return cls(
            importance=df.to_numpy(dtype=np.float64),
            feature_names=[str(c) for c in df.columns],
            task_names=[str(t) for t in df.index],
            centered_bias=np.full(len(df.index), np.nan),
            num_states=0,
            state_set={"source": str(path)},
        )


def feature_importance(
    checkpoint: PolicyCheckpoint, states: np.ndarray, state_set: dict[str, Any] | None = None
) -> FeatureImportanceReport:
    """Mean absolute mean-centered contribution of every feature to every task."""

    _require_nam(checkpoint)
    cfg = checkpoint.env_config
    names = feature_names(cfg)
    states = _require_states(states, len(names))
    std = checkpoint.standardizer
    with torch.no_grad():
        c = checkpoint.actor.contributions(as_tensor(std.standardize_obs(states))).numpy()
        beta = checkpoint.actor.task_bias.detach().numpy()
    c = c * std.act_scale[None, :, None]
    fi, means = centered_importance(c)
    bias = beta * std.act_scale + std.act_offset + means.sum(axis=1)
    return FeatureImportanceReport(
        importance=fi,
        feature_names=names,
        task_names=task_names(cfg),
        centered_bias=bias,
        num_states=int(states.shape[0]),
        state_set={"centered": True, **(state_set or {})},
    )


@dataclass
class AggregateImportance:
    feature_names: list[str]
    task_names: list[str]
    median: np.ndarray
    std: np.ndarray
    median_normalized: np.ndarray
    std_normalized: np.ndarray
    num_reports: int

    def frame(self):
        import pandas as pd  # type: ignore

        rows = []
        for t, task in enumerate(self.task_names):
            for i, feat in enumerate(self.feature_names):
                rows.append(
                    {
                        "task": task,
                        "feature": feat,
                        "median": self.median[t, i],
                        "std": self.std[t, i],
                        "median_normalized": self.median_normalized[t, i],
                        "std_normalized": self.std_normalized[t, i],
                    }
                )
        return pd.DataFrame(rows)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(path, index=False)
        return path


def aggregate_importance(reports: Sequence[FeatureImportanceReport]) -> AggregateImportance:
    """Median/std across trainings, raw and with each report scaled by its per-task maximum."""

    if not reports:
        raise ContractError("no feature-importance reports to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if r.feature_names != first.feature_names or r.task_names != first.task_names:
            raise ContractError("feature-importance reports disagree on features or tasks")
    stack = np.stack([r.importance for r in reports])  # (R, T, N)
    peak = stack.max(axis=2, keepdims=True)
    normalized = np.divide(stack, peak, out=np.zeros_like(stack), where=peak > 0)
    return AggregateImportance(
        feature_names=list(first.feature_names),
        task_names=list(first.task_names),
        median=np.median(stack, axis=0),
        std=stack.std(axis=0),
        median_normalized=np.median(normalized, axis=0),
        std_normalized=normalized.std(axis=0),
        num_reports=len(reports),
    )


def top_features(
    report: FeatureImportanceReport | AggregateImportance,
    task: int | str,
    k: int = 3,
    exclude: Iterable[str] = (),
) -> list[str]:
    """The ``k`` most important features of ``task``, skipping names with an ``exclude`` prefix."""

    t = report.task_names.index(task) if isinstance(task, str) else int(task)
    if isinstance(report, FeatureImportanceReport):
        values = report.importance[t]
    else:
        values = report.median[t]
    prefixes = tuple(exclude)
    order = np.argsort(-values, kind="stable")
    names = [report.feature_names[i] for i in order]
    picked = [name for name in names if not (prefixes and name.startswith(prefixes))]
    return picked[:k]


class LookupPolicy:
    """A policy computed only from a :class:`ShapeFunctionTable`; no network needed."""

    def __init__(self, table: ShapeFunctionTable):
        meta = table.metadata
        try:
            self.capacities = np.asarray(meta["capacities"], dtype=np.float64)
            self.act_offset = np.asarray(meta["action_offset"], dtype=np.float64)
            self.act_scale = np.asarray(meta["action_scale"], dtype=np.float64)
        except KeyError as e:
            raise FormatError(f"shape-function table metadata lacks {e}") from e
        t = len(table.task_names)
        checks = (
            ("capacities", self.capacities),
            ("action_offset", self.act_offset),
            ("action_scale", self.act_scale),
        )
        for name, arr in checks:
            if arr.shape != (t,):
                raise FormatError(f"table metadata '{name}' must have {t} entries, got {arr.shape}")
        if np.any(self.act_scale <= 0):
            raise FormatError("table metadata 'action_scale' must be > 0")
        self.table = table

    @classmethod
    def from_json(cls, path: str | Path) -> "LookupPolicy":
        return cls(ShapeFunctionTable.from_json(path))

    def means(self, observation: np.ndarray) -> np.ndarray:
        out = self.table.reconstruct(observation)
        return out[0] if np.ndim(observation) == 1 else out

    def standardized_means(self, observation: np.ndarray) -> np.ndarray:
        return (self.means(observation) - self.act_offset) / self.act_scale

    def act(
        self, observation: np.ndarray, rng: np.random.Generator, deterministic: bool = True
    ) -> np.ndarray:
        x = np.clip(self.means(observation), 0.0, self.capacities)
        return np.floor(x + 0.5).astype(np.int64)


def compile_lookup_policy(table: ShapeFunctionTable) -> LookupPolicy:
    return LookupPolicy(table)
