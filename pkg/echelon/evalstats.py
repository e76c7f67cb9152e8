"""Rollout harness, interquartile mean and percentile-bootstrap confidence bounds.

Every (checkpoint position ``i``, rollout ``r``) pair owns its random streams:
the environment draws from ``stream(eval.seed, EVAL, i, r)`` and a sampling
policy from ``stream(eval.seed, EVAL, i, r, 1)``. Two architectures evaluated
with the same eval seed therefore face identical demand scenarios.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from echelon import seeding
from echelon.config import EvalConfig, config_digest, to_plain
from echelon.env import Policy, SupplyChainConfig, run_episode
from echelon.errors import ContractError, FormatError

logger = logging.getLogger(__name__)

CI_PERCENTILES = (5.0, 95.0)


def _iqm_weights(n: int) -> np.ndarray:
    # Sorted item k covers [k, k+1); keep its overlap with [n/4, 3n/4].
    k = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(k + 1.0, 0.75 * n) - np.maximum(k, 0.25 * n), 0.0, 1.0)


def iqm(values: Any, axis: int | None = None) -> float | np.ndarray:
    """Interquartile mean with fractional trimming at the quartile cuts."""

    arr = np.asarray(values, dtype=np.float64)
    if axis is None:
        arr = arr.ravel()
        axis = 0
    n = arr.shape[axis]
    if n == 0:
        raise ContractError("iqm of an empty sample")
    s = np.moveaxis(np.sort(arr, axis=axis), axis, -1)
    out = s @ _iqm_weights(n) / (0.5 * n)
    return float(out) if np.ndim(out) == 0 else out


def bootstrap_ci(
    values: Any,
    statistic: Callable[..., Any] = iqm,
    n_resamples: int = 2000,
    rng: np.random.Generator | None = None,
    percentiles: tuple[float, float] = CI_PERCENTILES,
) -> tuple[float, float]:
    """Percentile bootstrap interval of ``statistic`` over ``values``.

    ``statistic`` is called as ``statistic(samples, axis=1)`` on the whole
    resample matrix when it supports ``axis``, else once per resample.
    """

    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size < 2:
        raise ContractError(f"bootstrap needs at least 2 values, got {arr.size}")
    if n_resamples < 100:
        raise ContractError(f"bootstrap needs >= 100 resamples, got {n_resamples}")
    rng = rng if rng is not None else np.random.default_rng(0)
    samples = arr[rng.integers(0, arr.size, size=(n_resamples, arr.size))]
    try:
        stats = np.asarray(statistic(samples, axis=1), dtype=np.float64)
    except TypeError:
        stats = np.array([statistic(row) for row in samples], dtype=np.float64)
    lo, hi = np.percentile(stats, percentiles)
    return float(lo), float(hi)


def rollout_policy(
    policy: Policy,
    config: SupplyChainConfig,
    rng: np.random.Generator,
    deterministic: bool = True,
    *,
    policy_rng: np.random.Generator | None = None,
    demand: int | None = None,
) -> tuple[float, np.ndarray]:
    """One episode; returns the cumulative reward and the per-step rewards."""

    trace = run_episode(
        policy, config, rng, deterministic=deterministic, policy_rng=policy_rng, demand=demand
    )
    return trace.total_reward, trace.rewards


@dataclass
class EvalReport:
    label: str
    seeds: list[int]
    returns: np.ndarray  # (num_seeds, rollouts_per_seed)
    iqm: float
    ci: tuple[float, float]
    horizon: int
    deterministic: bool
    bootstrap_samples: int
    config_digest: str
    step_rewards: np.ndarray | None = None  # (num_seeds * rollouts_per_seed, horizon)
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.returns)):
            raise ContractError(f"evaluation '{self.label}' produced non-finite returns")
        if self.ci[0] > self.ci[1]:
            raise ContractError(f"confidence bounds out of order: {self.ci}")

    @property
    def num_seeds(self) -> int:
        return int(self.returns.shape[0])

    @property
    def rollouts_per_seed(self) -> int:
        return int(self.returns.shape[1])

    def per_step_iqm(self) -> np.ndarray:
        if self.step_rewards is None:
            raise ContractError(f"report '{self.label}' carries no per-step rewards")
        return iqm(self.step_rewards, axis=0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "seeds": list(self.seeds),
            "num_seeds": self.num_seeds,
            "rollouts_per_seed": self.rollouts_per_seed,
            "horizon": self.horizon,
            "deterministic": self.deterministic,
            "bootstrap_samples": self.bootstrap_samples,
            "ci_percentiles": list(CI_PERCENTILES),
            "iqm": self.iqm,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "returns": self.returns.tolist(),
            "config_digest": self.config_digest,
            "extra": to_plain(self.extra),
        }

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        path.write_text(text, encoding="utf-8")
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "EvalReport":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Evaluation report not found: {path}")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
            return cls(
                label=d["label"],
                seeds=list(d["seeds"]),
                returns=np.asarray(d["returns"], dtype=np.float64),
                iqm=float(d["iqm"]),
                ci=(float(d["ci_lo"]), float(d["ci_hi"])),
                horizon=int(d["horizon"]),
                deterministic=bool(d["deterministic"]),
                bootstrap_samples=int(d["bootstrap_samples"]),
                config_digest=d["config_digest"],
                extra=dict(d.get("extra") or {}),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
            raise FormatError(f"Malformed evaluation report: {e} (file: {path})") from e

    def returns_frame(self):
        import pandas as pd  # type: ignore

        rows = [
            {"seed": seed, "rollout": r, "return": float(self.returns[i, r])}
            for i, seed in enumerate(self.seeds)
            for r in range(self.rollouts_per_seed)
        ]
        return pd.DataFrame(rows, columns=["seed", "rollout", "return"])

    def trajectories_frame(self):
        import pandas as pd  # type: ignore

        if self.step_rewards is None:
            raise ContractError(f"report '{self.label}' carries no per-step rewards")
        n_roll = self.rollouts_per_seed
        seed_col = np.repeat(np.asarray(self.seeds), n_roll * self.horizon)
        rollout_col = np.tile(np.repeat(np.arange(n_roll), self.horizon), self.num_seeds)
        step_col = np.tile(np.arange(self.horizon), self.num_seeds * n_roll)
        return pd.DataFrame(
            {
                "seed": seed_col,
                "rollout": rollout_col,
                "step": step_col,
                "reward": self.step_rewards.ravel(),
            }
        )

    def write_returns_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.returns_frame().to_csv(path, index=False)
        return path

    def write_trajectories_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.trajectories_frame().to_csv(path, index=False)
        return path


def summarize(
    label: str,
    seeds: Sequence[int],
    returns: np.ndarray,
    step_rewards: np.ndarray | None,
    env_config: SupplyChainConfig,
    eval_cfg: EvalConfig,
    extra: Mapping[str, Any] | None = None,
) -> EvalReport:
    """IQM and bootstrap bounds over an already collected return matrix."""

    flat = np.asarray(returns, dtype=np.float64).ravel()
    boot_rng = seeding.stream(eval_cfg.seed, seeding.BOOTSTRAP)
    if flat.size >= 2:
        ci = bootstrap_ci(flat, iqm, eval_cfg.bootstrap_samples, boot_rng)
    else:
        ci = (float(flat[0]), float(flat[0]))
    return EvalReport(
        label=label,
        seeds=[int(s) for s in seeds],
        returns=np.asarray(returns, dtype=np.float64),
        iqm=iqm(flat),
        ci=ci,
        horizon=env_config.horizon,
        deterministic=eval_cfg.deterministic,
        bootstrap_samples=eval_cfg.bootstrap_samples,
        config_digest=config_digest({"env": env_config, "eval": eval_cfg}),
        step_rewards=step_rewards,
        extra=dict(extra or {}),
    )


def evaluate(
    policies: Mapping[int, Policy],
    env_config: SupplyChainConfig,
    eval_cfg: EvalConfig = EvalConfig(),
    *,
    label: str = "",
    demand: int | None = None,
    extra: Mapping[str, Any] | None = None,
) -> EvalReport:
    """Roll every policy ``eval_cfg.rollouts_per_seed`` times at ``eval_cfg.horizon``.

    ``policies`` maps the training seed to a loaded policy; the report keeps
    that seed order.
    """

    if not policies:
        raise ContractError("evaluate needs at least one policy")
    config = env_config.with_horizon(eval_cfg.horizon)
    seeds = list(policies)
    n_roll = eval_cfg.rollouts_per_seed
    returns = np.zeros((len(seeds), n_roll), dtype=np.float64)
    steps = np.zeros((len(seeds) * n_roll, config.horizon), dtype=np.float64)
    for i, seed in enumerate(seeds):
        policy = policies[seed]
        for r in range(n_roll):
            total, rewards = rollout_policy(
                policy,
                config,
                seeding.stream(eval_cfg.seed, seeding.EVAL, i, r),
                eval_cfg.deterministic,
                policy_rng=seeding.stream(eval_cfg.seed, seeding.EVAL, i, r, 1),
                demand=demand,
            )
            returns[i, r] = total
            steps[i * n_roll + r] = rewards
    report = summarize(label, seeds, returns, steps, config, eval_cfg, extra)
    logger.info(
        "Evaluated %s: %d rollouts, IQM %.2f [%.2f, %.2f]",
        label or "policy",
        returns.size,
        report.iqm,
        report.ci[0],
        report.ci[1],
    )
    return report


def load_checkpoints(paths: Mapping[int, str | Path]) -> dict[int, Any]:
    """Load ``{seed: path}`` checkpoints; a missing file names its seed and path."""

    from echelon.checkpoint import load_checkpoint

    out: dict[int, Any] = {}
    for seed, path in paths.items():
        if not Path(path).exists():
            raise FileNotFoundError(f"Checkpoint for seed {seed} not found: {path}")
        out[int(seed)] = load_checkpoint(path)
    return out
