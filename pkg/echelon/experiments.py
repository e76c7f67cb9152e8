"""Experiment harness: random search, benchmark, temporal stability, disruptions, hardening.

Each experiment writes ``manifest.json`` into its output directory before any
other artifact. Training jobs are independent and fan out over a joblib worker
pool; every job's seed is fixed by the job description, so the worker count
never changes results.

Output layout (relative to the experiment directory)::

    manifest.json
    resolved_config.yaml
    leaderboard.csv                      (sweep)
    checkpoints/<kind>/seed_<s>.h5       (benchmark, harden)
    logs/<kind>/seed_<s>.jsonl
    eval_report_<label>.json
    returns_<label>.csv
    trajectories/<label>.csv
    summary.csv / stability.csv / disruption.csv / hardened_vs_default.csv
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Literal, Mapping, Sequence

import numpy as np
from joblib import Parallel, delayed  # type: ignore

from echelon import seeding
from echelon.config import EvalConfig, RunConfig, SearchConfig, config_digest, dump_config, to_plain
from echelon.env import Policy, SupplyChainConfig
from echelon.errors import ConfigError, ContractError
from echelon.evalstats import EvalReport, evaluate, rollout_policy
from echelon.policy import BaseStockPolicy, PolicyConfig, RandomPolicy
from echelon.ppo import PpoConfig, train

logger = logging.getLogger(__name__)

Scaling = Literal["linear", "log", "fixed"]


@dataclass(frozen=True)
class ParamRange:
    """One searchable hyperparameter, addressed by its dotted config path."""

    name: str
    low: float
    high: float
    scaling: Scaling = "linear"
    integer: bool = False

    def __post_init__(self) -> None:
        if "." not in self.name:
            raise ConfigError(self.name, "search parameters are addressed as 'section.key'")
        if self.scaling not in ("linear", "log", "fixed"):
            raise ConfigError(self.name, f"unknown scaling {self.scaling!r}")
        if self.low > self.high:
            raise ConfigError(self.name, f"low {self.low} > high {self.high}")
        if self.scaling == "log" and self.low <= 0:
            raise ConfigError(self.name, "log scaling needs a positive lower bound")
        if self.scaling == "fixed" and self.low != self.high:
            raise ConfigError(self.name, "fixed parameters need low == high")

    def sample(self, rng: np.random.Generator) -> float | int:
        if self.scaling == "fixed":
            value = self.low
        elif self.scaling == "log":
            value = math.exp(rng.uniform(math.log(self.low), math.log(self.high)))
        else:
            value = rng.uniform(self.low, self.high)
        if self.integer:
            rounded = math.floor(value + 0.5)
            return int(min(max(rounded, math.ceil(self.low)), math.floor(self.high)))
        return float(min(max(value, self.low), self.high))

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[ParamRange, ...]

    @classmethod
    def default(cls) -> "SearchSpace":
        return cls(
            (
                ParamRange("ppo.learning_rate", 1e-4, 1e-3, "log"),
                ParamRange("ppo.batch_size", 32, 128, "linear", integer=True),
                ParamRange("policy.hidden_layers", 1, 4, "linear", integer=True),
                ParamRange("policy.hidden_width", 8, 32, "linear", integer=True),
                ParamRange("ppo.n_epochs", 2, 51, "linear", integer=True),
            )
        )

    @classmethod
    def fixed(cls, values: Mapping[str, float]) -> "SearchSpace":
        return cls(
            tuple(
                ParamRange(name, v, v, "fixed", integer=isinstance(v, int))
                for name, v in values.items()
            )
        )

    def sample(self, rng: np.random.Generator) -> dict[str, Any]:
        return {p.name: p.sample(rng) for p in self.params}

    def contains(self, hp: Mapping[str, Any]) -> bool:
        return all(p.contains(hp[p.name]) for p in self.params)


def sample_configs(space: SearchSpace, n: int, seed: int) -> list[dict[str, Any]]:
    rng = seeding.stream(seed, seeding.SEARCH)
    return [space.sample(rng) for _ in range(n)]


def apply_hyperparameters(cfg: RunConfig, hp: Mapping[str, Any]) -> RunConfig:
    """Return ``cfg`` with ``section.key`` values replaced; unknown keys raise ConfigError."""

    sections: dict[str, dict[str, Any]] = {}
    for name, value in hp.items():
        section, _, key = name.partition(".")
        sections.setdefault(section, {})[key] = value
    updates = {}
    for section, values in sections.items():
        if not hasattr(cfg, section):
            raise ConfigError(section, "unknown section in hyperparameters")
        current = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(current)}
        for key in values:
            if key not in known:
                raise ConfigError(f"{section}.{key}", "unknown hyperparameter")
        updates[section] = dataclasses.replace(current, **values)
    return dataclasses.replace(cfg, **updates)


def _run_git(repo_root: Path, args: list[str]) -> str | None:
    try:
        p = subprocess.run(
            ["git", *args],
            cwd=str(repo_root),
            check=True,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
    except Exception:
        return None
    return p.stdout.strip() or None


@dataclass
class ExperimentManifest:
    kind: str
    config_digest: str
    seeds: dict[str, list[int]]
    outputs: dict[str, str]
    version: str
    git_commit: str
    created: str
    config: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        kind: str,
        cfg: RunConfig,
        seeds: Mapping[str, Sequence[int]],
        outputs: Mapping[str, str],
        extra: Mapping[str, Any] | None = None,
    ) -> "ExperimentManifest":
        from echelon import __version__

        repo_root = Path(__file__).resolve().parent.parent
        return cls(
            kind=kind,
            config_digest=config_digest(cfg),
            seeds={k: [int(s) for s in v] for k, v in seeds.items()},
            outputs=dict(outputs),
            version=__version__,
            git_commit=_run_git(repo_root, ["rev-parse", "HEAD"]) or "unknown",
            created=datetime.now(timezone.utc).replace(microsecond=0).isoformat(),
            config=to_plain(cfg),
            extra=dict(extra or {}),
        )

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        text = json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"
        path.write_text(text, encoding="utf-8")
        return path


def _start(
    kind: str,
    cfg: RunConfig,
    out_dir: Path,
    seeds: Mapping[str, Sequence[int]],
    outputs: Mapping[str, str],
    extra=None,
) -> ExperimentManifest:
    manifest = ExperimentManifest.create(kind, cfg, seeds, outputs, extra)
    manifest.write(out_dir)
    dump_config(cfg, out_dir / "resolved_config.yaml")
    logger.info("Experiment '%s' -> %s (config %s)", kind, out_dir, manifest.config_digest[:12])
    return manifest


# ----------------------------- random search -------------------------------------------


def validation_score(
    policy: Policy, env_config: SupplyChainConfig, search_cfg: SearchConfig
) -> float:
    """Cumulative deterministic reward of one episode in the fixed validation environment."""

    total, _ = rollout_policy(
        policy,
        env_config.with_horizon(search_cfg.validation_horizon),
        seeding.stream(search_cfg.validation_seed, seeding.EVAL),
        True,
    )
    return total


TrainFn = Callable[..., Any]


def _search_trial(
    base: RunConfig,
    hp: Mapping[str, Any],
    kind: str,
    config_id: int,
    seed: int,
    search_cfg: SearchConfig,
    train_fn: TrainFn,
    log_dir: str | None,
) -> dict[str, Any]:
    log_path = None
    if log_dir is not None:
        log_path = str(Path(log_dir) / f"config_{config_id:03d}_seed_{seed}.jsonl")
    try:
        # a sampled combination can itself be invalid, e.g. batch_size > n_steps
        cfg = apply_hyperparameters(base, hp)
        ppo = dataclasses.replace(cfg.ppo, total_steps=search_cfg.trial_steps)
        result = train_fn(cfg.env, kind, ppo, cfg.policy, seed, log_path=log_path)
        score = validation_score(result.checkpoint, cfg.env, search_cfg)
        status = "ok"
    except Exception as e:
        logger.warning(
            "Trial config=%d seed=%d failed: %s: %s", config_id, seed, type(e).__name__, e
        )
        score = float("-inf")
        status = f"failed: {type(e).__name__}: {e}"
    return {"config_id": config_id, "seed": seed, "score": float(score), "status": status}


def _pick_incumbent(
    cfg: RunConfig, configs: Sequence[Mapping[str, Any]], leaderboard: Sequence[dict[str, Any]]
) -> tuple[dict[str, Any], RunConfig]:
    """Best leaderboard row whose hyperparameters form a valid config."""

    for row in leaderboard:
        try:
            return row, apply_hyperparameters(cfg, configs[row["config_id"]])
        except ConfigError as e:
            logger.warning("Config %d is not a valid run config: %s", row["config_id"], e)
    raise ConfigError("search", "no sampled configuration is valid for this base config")


@dataclass
class SearchResult:
    incumbent_id: int
    incumbent: dict[str, Any]
    incumbent_config: RunConfig
    leaderboard: list[dict[str, Any]]
    trials: list[dict[str, Any]]

    def leaderboard_frame(self):
        import pandas as pd  # type: ignore

        return pd.DataFrame(self.leaderboard)

    def write_leaderboard(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.leaderboard_frame().to_csv(path, index=False)
        return path


def random_search(
    cfg: RunConfig,
    kind: str,
    space: SearchSpace | None = None,
    *,
    out_dir: str | Path | None = None,
    workers: int | None = None,
    train_fn: TrainFn = train,
) -> SearchResult:
    """Sample ``search.n_configs`` configs, train ``seeds_per_config`` policies each, keep the best.

    A failed training scores ``-inf`` for that trial; the sweep always completes.
    """

    space = space or SearchSpace.default()
    scfg = cfg.search
    configs = sample_configs(space, scfg.n_configs, scfg.search_seed)
    seeds = list(range(scfg.seeds_per_config))
    out = Path(out_dir) if out_dir is not None else None
    log_dir = None
    if out is not None:
        _start(
            "sweep",
            cfg,
            out,
            {"training": seeds, "validation": [scfg.validation_seed]},
            {"leaderboard": "leaderboard.csv", "logs": "logs/"},
            {"kind": kind, "space": [dataclasses.asdict(p) for p in space.params]},
        )
        log_dir = str(out / "logs")

    jobs = [
        (cfg, hp, kind, cid, seed, scfg, train_fn, log_dir)
        for cid, hp in enumerate(configs)
        for seed in seeds
    ]
    n_jobs = workers or cfg.experiment.workers
    trials = Parallel(n_jobs=n_jobs)(delayed(_search_trial)(*job) for job in jobs)

    leaderboard = []
    for cid, hp in enumerate(configs):
        scores = [t["score"] for t in trials if t["config_id"] == cid]
        failures = sum(1 for t in trials if t["config_id"] == cid and t["status"] != "ok")
        mean = float(np.mean(scores)) if failures == 0 else float("-inf")
        leaderboard.append(
            {
                "config_id": cid,
                **hp,
                "score": mean,
                "seed_scores": json.dumps(scores),
                "failures": failures,
            }
        )
    leaderboard.sort(key=lambda row: (-row["score"], row["config_id"]))
    best, incumbent_config = _pick_incumbent(cfg, configs, leaderboard)
    if not math.isfinite(best["score"]):
        logger.warning("Every search configuration failed; keeping config %d", best["config_id"])
    incumbent = configs[best["config_id"]]
    logger.info(
        "Search incumbent: config %d score %.2f %s", best["config_id"], best["score"], incumbent
    )
    result = SearchResult(
        incumbent_id=best["config_id"],
        incumbent=incumbent,
        incumbent_config=incumbent_config,
        leaderboard=leaderboard,
        trials=list(trials),
    )
    if out is not None:
        result.write_leaderboard(out / "leaderboard.csv")
        payload = {"config_id": best["config_id"], "hyperparameters": incumbent}
        (out / "incumbent.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return result


# ----------------------------- training fan-out ----------------------------------------


def _train_job(
    env_config: SupplyChainConfig,
    kind: str,
    ppo: PpoConfig,
    policy: PolicyConfig,
    seed: int,
    ckpt_path: str,
    log_path: str,
    train_fn: TrainFn,
) -> str:
    from echelon.checkpoint import save_checkpoint

    result = train_fn(env_config, kind, ppo, policy, seed, log_path=log_path)
    result.checkpoint.metadata["checkpoint_id"] = f"{kind}/seed_{seed}"
    save_checkpoint(result.checkpoint, ckpt_path)
    return ckpt_path


def train_seeds(
    cfg: RunConfig,
    kind: str,
    seeds: Sequence[int],
    out_dir: Path,
    *,
    env_config: SupplyChainConfig | None = None,
    workers: int | None = None,
    train_fn: TrainFn = train,
) -> dict[int, Path]:
    """Train one checkpoint per seed under ``out_dir/checkpoints/<kind>/``."""

    env_config = env_config or cfg.env
    jobs = [
        (
            env_config,
            kind,
            cfg.ppo,
            cfg.policy,
            seed,
            str(out_dir / "checkpoints" / kind / f"seed_{seed}.h5"),
            str(out_dir / "logs" / kind / f"seed_{seed}.jsonl"),
            train_fn,
        )
        for seed in seeds
    ]
    parallel = Parallel(n_jobs=workers or cfg.experiment.workers)
    paths = parallel(delayed(_train_job)(*job) for job in jobs)
    return {int(seed): Path(p) for seed, p in zip(seeds, paths)}


def _load(paths: Mapping[int, Path]) -> dict[int, Any]:
    from echelon.evalstats import load_checkpoints

    return load_checkpoints(paths)


def _write_report(report: EvalReport, out_dir: Path) -> None:
    report.to_json(out_dir / f"eval_report_{report.label}.json")
    report.write_returns_csv(out_dir / f"returns_{report.label}.csv")
    report.write_trajectories_csv(out_dir / "trajectories" / f"{report.label}.csv")


def _summary_row(report: EvalReport, **extra: Any) -> dict[str, Any]:
    return {
        **extra,
        "label": report.label,
        "iqm": report.iqm,
        "ci_lo": report.ci[0],
        "ci_hi": report.ci[1],
        "num_returns": int(report.returns.size),
    }


def _write_table(rows: list[dict[str, Any]], path: Path) -> Path:
    import pandas as pd  # type: ignore

    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


# ----------------------------- benchmark -----------------------------------------------


def baseline_policies(
    env_config: SupplyChainConfig, seeds: Sequence[int]
) -> dict[str, dict[int, Policy]]:
    return {
        "random": {s: RandomPolicy(env_config) for s in seeds},
        "base_stock": {s: BaseStockPolicy(env_config) for s in seeds},
    }


def run_benchmark(
    incumbents: Mapping[str, RunConfig],
    out_dir: str | Path,
    *,
    workers: int | None = None,
    train_fn: TrainFn = train,
) -> dict[str, EvalReport]:
    """Retrain each architecture on ``eval.num_seeds`` seeds and evaluate it next to the baselines.

    ``incumbents`` maps a policy kind ('nam'/'mlp') to its tuned config. All
    reports share the evaluation seeds of the first incumbent's ``eval`` section.
    """

    if not incumbents:
        raise ContractError("run_benchmark needs at least one incumbent config")
    out = Path(out_dir)
    first = next(iter(incumbents.values()))
    seeds = list(range(first.eval.num_seeds))
    _start(
        "benchmark",
        first,
        out,
        {"training": seeds, "evaluation": [first.eval.seed]},
        {
            "reports": "eval_report_<label>.json",
            "trajectories": "trajectories/",
            "summary": "summary.csv",
        },
        {
            "incumbents": {
                k: to_plain({"ppo": c.ppo, "policy": c.policy}) for k, c in incumbents.items()
            }
        },
    )
    reports: dict[str, EvalReport] = {}
    for kind, cfg in incumbents.items():
        paths = train_seeds(cfg, kind, seeds, out, workers=workers, train_fn=train_fn)
        reports[kind] = evaluate(_load(paths), cfg.env, first.eval, label=kind)
    for label, policies in baseline_policies(first.env, seeds).items():
        reports[label] = evaluate(policies, first.env, first.eval, label=label)
    for report in reports.values():
        _write_report(report, out)
    _write_table([_summary_row(r) for r in reports.values()], out / "summary.csv")
    return reports


# ----------------------------- robustness studies --------------------------------------


def temporal_stability(
    policies: Mapping[int, Policy],
    env_config: SupplyChainConfig,
    eval_cfg: EvalConfig,
    horizons: Sequence[int],
    *,
    label: str = "policy",
    out_dir: str | Path | None = None,
) -> list[dict[str, Any]]:
    """Evaluate the same policies, without retraining, at every horizon."""

    rows = []
    for h in horizons:
        report = evaluate(
            policies,
            env_config,
            dataclasses.replace(eval_cfg, horizon=int(h)),
            label=f"{label}_h{h}",
            extra={"horizon": int(h)},
        )
        rows.append(_summary_row(report, horizon=int(h), profitable=bool(report.iqm > 0)))
        if out_dir is not None:
            report.write_trajectories_csv(Path(out_dir) / "trajectories" / f"{report.label}.csv")
    if out_dir is not None:
        _write_table(rows, Path(out_dir) / f"stability_{label}.csv")
    return rows


def disruption_eval(
    policies: Mapping[int, Policy],
    env_config: SupplyChainConfig,
    eval_cfg: EvalConfig,
    strengths: Sequence[float],
    *,
    start: int | None = None,
    label: str = "policy",
    out_dir: str | Path | None = None,
) -> tuple[list[dict[str, Any]], dict[float, EvalReport]]:
    """IQM and bounds per disruption strength; ``start`` defaults to half the horizon."""

    c = eval_cfg.horizon // 2 if start is None else int(start)
    rows: list[dict[str, Any]] = []
    reports: dict[float, EvalReport] = {}
    for s in strengths:
        cfg = env_config.with_disruption(float(s), c)
        report = evaluate(
            policies,
            cfg,
            eval_cfg,
            label=f"{label}_sd{s:g}",
            extra={"disruption_strength": float(s), "disruption_start": c},
        )
        reports[float(s)] = report
        rows.append(_summary_row(report, disruption_strength=float(s), disruption_start=c))
        if out_dir is not None:
            report.write_trajectories_csv(Path(out_dir) / "trajectories" / f"{report.label}.csv")
    if out_dir is not None:
        _write_table(rows, Path(out_dir) / f"disruption_{label}.csv")
    return rows, reports


@dataclass
class HardenedResult:
    kind: str
    checkpoints: dict[int, Path]
    table: list[dict[str, Any]]
    reports: dict[float, EvalReport]
    comparison: list[dict[str, Any]] | None = None


def hardened_training(
    cfg: RunConfig,
    kind: str,
    out_dir: str | Path,
    *,
    default_policies: Mapping[int, Policy] | None = None,
    workers: int | None = None,
    train_fn: TrainFn = train,
) -> HardenedResult:
    """Retrain with the disruption active, then run the disruption study on the hardened policies.

    With ``default_policies`` the same study runs on them too and a
    hardened-vs-default table is written.
    """

    ex = cfg.experiment
    out = Path(out_dir)
    seeds = list(range(ex.hardened_seeds))
    train_env = cfg.env.with_disruption(ex.hardened_strength, ex.hardened_start)
    eval_cfg = dataclasses.replace(cfg.eval, num_seeds=len(seeds))
    _start(
        "harden",
        cfg,
        out,
        {"training": seeds, "evaluation": [eval_cfg.seed]},
        {"checkpoints": f"checkpoints/{kind}/", "table": f"disruption_{kind}_hardened.csv"},
        {
            "kind": kind,
            "train_disruption": {"strength": ex.hardened_strength, "start": ex.hardened_start},
        },
    )
    paths = train_seeds(
        cfg, kind, seeds, out, env_config=train_env, workers=workers, train_fn=train_fn
    )
    hardened = _load(paths)
    table, reports = disruption_eval(
        hardened,
        cfg.env,
        eval_cfg,
        ex.disruption_strengths,
        start=ex.disruption_start,
        label=f"{kind}_hardened",
        out_dir=out,
    )
    result = HardenedResult(kind=kind, checkpoints=paths, table=table, reports=reports)
    if default_policies:
        default_cfg = dataclasses.replace(cfg.eval, num_seeds=len(default_policies))
        default_table, _ = disruption_eval(
            default_policies,
            cfg.env,
            default_cfg,
            ex.disruption_strengths,
            start=ex.disruption_start,
            label=f"{kind}_default",
            out_dir=out,
        )
        result.comparison = [
            {
                "disruption_strength": h["disruption_strength"],
                "default_iqm": d["iqm"],
                "default_ci_lo": d["ci_lo"],
                "default_ci_hi": d["ci_hi"],
                "hardened_iqm": h["iqm"],
                "hardened_ci_lo": h["ci_lo"],
                "hardened_ci_hi": h["ci_hi"],
                "difference": h["iqm"] - d["iqm"],
            }
            for d, h in zip(default_table, table)
        ]
        _write_table(result.comparison, out / "hardened_vs_default.csv")
    return result
