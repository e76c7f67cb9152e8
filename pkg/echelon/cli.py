"""Command-line entry point: ``echelon <command> [options]`` / ``python -m echelon``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 I/O (missing file,
missing optional dependency), 5 training diverged, 6 contract/format/protocol.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import re
from pathlib import Path
from typing import Any, Callable, Iterable

import yaml  # type: ignore

from echelon.config import RunConfig, dump_config, load_config, to_plain
from echelon.errors import ConfigError, ContractError, FormatError, ProtocolError, TrainingError

logger = logging.getLogger("echelon")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_TRAINING = 5
EXIT_CONTRACT = 6

_SEED_RE = re.compile(r"seed_(\d+)")
_EXPERIMENT_COMMANDS = ("sweep", "benchmark", "harden")


# ----------------------------- helpers -------------------------------------------------


def _checkpoint_paths(args: argparse.Namespace) -> dict[int, Path]:
    """``{seed: path}`` from ``--checkpoint`` files and/or a ``--checkpoint-dir``."""

    paths: list[Path] = [Path(p) for p in (args.checkpoint or [])]
    if args.checkpoint_dir is not None:
        root = Path(args.checkpoint_dir)
        if not root.is_dir():
            raise FileNotFoundError(f"Checkpoint directory not found: {root}")
        found = root.glob("seed_*.h5")
        paths.extend(sorted(found, key=lambda p: int(_SEED_RE.search(p.name).group(1))))
    if not paths:
        raise ContractError("no checkpoints given; use --checkpoint or --checkpoint-dir")
    out: dict[int, Path] = {}
    for pos, p in enumerate(paths):
        m = _SEED_RE.search(p.name)
        out[int(m.group(1)) if m else pos] = p
    return out


def _load_policies(args: argparse.Namespace) -> dict[int, Any]:
    from echelon.evalstats import load_checkpoints

    return load_checkpoints(_checkpoint_paths(args))


def _label(args: argparse.Namespace, policies: dict[int, Any]) -> str:
    if args.label:
        return args.label
    first = next(iter(policies.values()))
    return getattr(first, "kind", "policy")


def _print_row(prefix: str, row: dict[str, Any]) -> None:
    print(f"{prefix}: IQM {row['iqm']:.2f} [{row['ci_lo']:.2f}, {row['ci_hi']:.2f}]")


# ----------------------------- commands ------------------------------------------------


def cmd_train(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    from echelon.checkpoint import save_checkpoint
    from echelon.ppo import train

    kind = args.kind or cfg.policy.kind
    seed = 0 if args.seed is None else args.seed
    try:
        result = train(cfg.env, kind, cfg.ppo, cfg.policy, seed, log_path=out / "train_log.jsonl")
    except TrainingError as e:
        if e.checkpoint is not None:
            path = save_checkpoint(e.checkpoint, out / "checkpoint_last_good.h5")
            logger.error("Last finite parameters saved to %s", path)
        raise
    result.checkpoint.metadata["checkpoint_id"] = f"{kind}/seed_{seed}"
    path = save_checkpoint(result.checkpoint, out / f"seed_{seed}.h5")
    logger.info("Checkpoint written to %s", path)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    from echelon.evalstats import evaluate

    policies = _load_policies(args)
    eval_cfg = dataclasses.replace(cfg.eval, num_seeds=len(policies))
    if args.stochastic:
        eval_cfg = dataclasses.replace(eval_cfg, deterministic=False)
    env = next(iter(policies.values())).env_config
    report = evaluate(policies, env, eval_cfg, label=_label(args, policies))
    report.to_json(out / f"eval_report_{report.label}.json")
    report.write_returns_csv(out / f"returns_{report.label}.csv")
    if args.trajectories:
        report.write_trajectories_csv(out / "trajectories" / f"{report.label}.csv")
    lo, hi = report.ci
    n = report.returns.size
    print(f"{report.label}: IQM {report.iqm:.2f} [{lo:.2f}, {hi:.2f}] over {n} rollouts")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    from echelon.experiments import random_search

    kind = args.kind or cfg.policy.kind
    result = random_search(cfg, kind, out_dir=out, workers=args.workers)
    incumbent = result.incumbent_config
    policy = dataclasses.replace(incumbent.policy, kind=kind)
    incumbent = dataclasses.replace(incumbent, policy=policy)
    dump_config(incumbent, out / "incumbent_config.yaml")
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    from echelon.experiments import run_benchmark

    incumbents: dict[str, RunConfig] = {}
    for kind in args.kinds.split(","):
        kind = kind.strip()
        incumbents[kind] = cfg
    for item in args.incumbent or []:
        kind, sep, path = item.partition("=")
        if not sep:
            raise ConfigError("--incumbent", f"expected KIND=CONFIG, got {item!r}")
        incumbents[kind.strip()] = load_config(path, args.set or [])
    reports = run_benchmark(incumbents, out, workers=args.workers)
    for label, r in reports.items():
        print(f"{label}: IQM {r.iqm:.2f} [{r.ci[0]:.2f}, {r.ci[1]:.2f}]")
    return EXIT_OK


def cmd_stability(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    from echelon.experiments import temporal_stability

    policies = _load_policies(args)
    env = next(iter(policies.values())).env_config
    eval_cfg = dataclasses.replace(cfg.eval, num_seeds=len(policies))
    horizons = cfg.experiment.stability_horizons
    rows = temporal_stability(
        policies, env, eval_cfg, horizons, label=_label(args, policies), out_dir=out
    )
    for r in rows:
        _print_row(f"horizon {r['horizon']:>4}", r)
    return EXIT_OK


def cmd_disrupt(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    from echelon.experiments import disruption_eval

    policies = _load_policies(args)
    env = next(iter(policies.values())).env_config
    eval_cfg = dataclasses.replace(cfg.eval, num_seeds=len(policies))
    rows, _ = disruption_eval(
        policies,
        env,
        eval_cfg,
        cfg.experiment.disruption_strengths,
        start=cfg.experiment.disruption_start,
        label=_label(args, policies),
        out_dir=out,
    )
    for r in rows:
        _print_row(f"s_d={r['disruption_strength']:g}", r)
    return EXIT_OK


def cmd_harden(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    from echelon.experiments import hardened_training

    kind = args.kind or cfg.policy.kind
    defaults = _load_policies(args) if (args.checkpoint or args.checkpoint_dir) else None
    result = hardened_training(cfg, kind, out, default_policies=defaults, workers=args.workers)
    for r in result.table:
        _print_row(f"s_d={r['disruption_strength']:g}", r)
    return EXIT_OK


def cmd_explain(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    import pandas as pd  # type: ignore

    from echelon.checkpoint import load_checkpoint
    from echelon.interpret import (
        collect_states,
        compile_lookup_policy,
        feature_importance,
        trace_shape_functions,
    )
    from echelon.policy import feature_names

    path = next(iter(_checkpoint_paths(args).values()))
    ckpt = load_checkpoint(path)
    if ckpt.kind != "nam":
        raise ContractError(
            f"interpretation requires a NAM checkpoint; {path} holds a '{ckpt.kind}' policy"
        )
    icfg = cfg.interpret
    env = ckpt.env_config
    states = collect_states(ckpt, env, icfg.num_rollouts, icfg.seed)
    pd.DataFrame(states, columns=feature_names(env)).to_csv(out / "states.csv", index=False)
    table = trace_shape_functions(ckpt, states, icfg.grid_points, icfg.density_bins)
    table.write_csv(out / "shapes")
    table.to_json(out / "shapes.json")
    meta = {"num_rollouts": icfg.num_rollouts, "seed": icfg.seed}
    report = feature_importance(ckpt, states, meta)
    report.write_csv(out / "feature_importance.csv")
    lookup = compile_lookup_policy(table)
    lookup.table.to_json(out / "lookup_policy.json")
    logger.info("Interpretation artifacts written to %s", out)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    import pandas as pd  # type: ignore

    from echelon import plotting

    plots = out / "plots"
    made = 0
    if args.shapes:
        from echelon.interpret import ShapeFunctionTable

        table = ShapeFunctionTable.read_csv(args.shapes)
        tasks = range(len(table.task_names)) if args.task is None else [args.task]
        for t in tasks:
            target = plots / f"shapes_{table.task_names[t]}.svg"
            plotting.plot_shape_functions(table, t, args.features, target)
            made += 1
    if args.trajectories:
        curves = {}
        for p in args.trajectories:
            p = Path(p)
            if not p.exists():
                raise FileNotFoundError(f"Trajectory CSV not found: {p}")
            curves[p.stem] = plotting.trajectories_to_curve(pd.read_csv(p))
        plotting.plot_reward_trajectories(
            curves, plots / "trajectories.svg", disruption_start=args.disruption_start
        )
        made += 1
    if args.importance:
        from echelon.interpret import FeatureImportanceReport

        report = FeatureImportanceReport.read_csv(args.importance)
        plotting.plot_feature_importance(report, plots / "feature_importance.svg", top=args.top)
        made += 1
    if args.stability:
        tables = {}
        for p in args.stability:
            p = Path(p)
            if not p.exists():
                raise FileNotFoundError(f"Stability CSV not found: {p}")
            tables[p.stem] = pd.read_csv(p).to_dict("records")
        plotting.plot_temporal_stability(tables, plots / "stability.svg")
        made += 1
    if made == 0:
        raise ContractError(
            "nothing to plot; pass --shapes, --trajectories, --importance or --stability"
        )
    logger.info("%d plot(s) written to %s", made, plots)
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[[argparse.Namespace, RunConfig, Path], int], str]] = {
    "train": (cmd_train, "train one PPO policy"),
    "evaluate": (cmd_evaluate, "IQM + bootstrap bounds over checkpoints"),
    "sweep": (cmd_sweep, "random hyperparameter search"),
    "benchmark": (cmd_benchmark, "retrain and compare architectures against baselines"),
    "stability": (cmd_stability, "evaluate checkpoints across episode lengths"),
    "disrupt": (cmd_disrupt, "evaluate checkpoints under demand disruptions"),
    "harden": (cmd_harden, "retrain with disruptions and compare"),
    "explain": (cmd_explain, "shape functions, feature importance and lookup policy of a NAM"),
    "plot": (cmd_plot, "render SVG plots from emitted CSVs"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="echelon", description="Interpretable PPO policies for serial supply chains"
    )
    verbosity = p.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text, description=help_text)
        s.add_argument("--config", type=Path, default=None, help="YAML config file")
        s.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )
        s.add_argument("--seed", type=int, default=None, help="base seed of the command")
        s.add_argument(
            "--out", type=Path, default=None, help=f"output directory (default: runs/{name})"
        )
        if name in ("train", "sweep", "harden"):
            s.add_argument(
                "--kind", choices=("nam", "mlp"), default=None, help="policy architecture"
            )
        if name in ("sweep", "benchmark", "harden"):
            s.add_argument("--workers", type=int, default=None, help="parallel training jobs")
        if name in ("evaluate", "stability", "disrupt", "harden", "explain"):
            s.add_argument(
                "--checkpoint", action="append", metavar="PATH", help="checkpoint file (repeatable)"
            )
            s.add_argument(
                "--checkpoint-dir", default=None, help="directory of seed_<n>.h5 checkpoints"
            )
        if name in ("evaluate", "stability", "disrupt"):
            s.add_argument("--label", default=None, help="report label (default: policy kind)")
        if name == "evaluate":
            s.add_argument(
                "--trajectories", action="store_true", help="also write per-step rewards"
            )
            s.add_argument(
                "--stochastic", action="store_true", help="sample actions instead of the mean"
            )
        if name == "benchmark":
            s.add_argument("--kinds", default="nam,mlp", help="comma-separated architectures")
            s.add_argument(
                "--incumbent",
                action="append",
                metavar="KIND=CONFIG",
                help="tuned config per architecture",
            )
        if name == "plot":
            s.add_argument("--shapes", type=Path, default=None, help="shape-function CSV directory")
            s.add_argument(
                "--task", type=int, default=None, help="task index to plot (default: all)"
            )
            s.add_argument("--features", nargs="+", default=None, help="feature names to plot")
            s.add_argument("--trajectories", nargs="+", default=None, help="trajectory CSV files")
            s.add_argument(
                "--disruption-start", type=int, default=None, help="mark the disruption onset"
            )
            s.add_argument("--importance", type=Path, default=None, help="feature-importance CSV")
            s.add_argument("--top", type=int, default=None, help="show only the top features")
            s.add_argument("--stability", nargs="+", default=None, help="stability CSV files")
    return p


def _apply_seed(cfg: RunConfig, command: str, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    if command == "sweep":
        return dataclasses.replace(cfg, search=dataclasses.replace(cfg.search, search_seed=seed))
    if command == "explain":
        return dataclasses.replace(cfg, interpret=dataclasses.replace(cfg.interpret, seed=seed))
    if command == "train":
        return cfg
    return dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, seed=seed))


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Iterable[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(None if argv is None else list(argv))
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    _configure_logging(args)
    handler, _ = COMMANDS[args.command]
    try:
        cfg = _apply_seed(load_config(args.config, args.set or []), args.command, args.seed)
        out = args.out or Path("runs") / args.command
        out.mkdir(parents=True, exist_ok=True)
        # Experiment commands write their manifest before the resolved config.
        if args.command not in _EXPERIMENT_COMMANDS:
            dump_config(cfg, out / "resolved_config.yaml")
        logger.debug("Resolved config:\n%s", yaml.safe_dump(to_plain(cfg), sort_keys=True))
        return handler(args, cfg, out)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (FileNotFoundError, ImportError, OSError) as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except TrainingError as e:
        logger.error("training failed: %s", e)
        return EXIT_TRAINING
    except (ContractError, FormatError, ProtocolError) as e:
        logger.error("%s", e)
        return EXIT_CONTRACT


if __name__ == "__main__":
    raise SystemExit(main())
