"""Structured run configuration: YAML file + dotted-path overrides.

A config file has up to seven sections::

    env:        SupplyChainConfig (with nested ``demand``)
    policy:     PolicyConfig
    ppo:        PpoConfig
    eval:       EvalConfig
    search:     SearchConfig
    interpret:  InterpretConfig
    experiment: ExperimentConfig

Missing sections and keys take their defaults; unknown ones are rejected.
Overrides look like ``ppo.learning_rate=5e-4`` or ``env.demand.base_lambda=25``;
the value is parsed as a YAML scalar/flow value.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml  # type: ignore

from echelon.env import DemandConfig, SupplyChainConfig
from echelon.errors import ConfigError
from echelon.policy import PolicyConfig
from echelon.ppo import PpoConfig

logger = logging.getLogger(__name__)


class _ConfigLoader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``5e-4``, ``1e5``)."""


_ConfigLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _parse_yaml(text: str) -> Any:
    return yaml.load(text, Loader=_ConfigLoader)


@dataclass(frozen=True)
class EvalConfig:
    num_seeds: int = 20
    rollouts_per_seed: int = 50
    horizon: int = 60
    bootstrap_samples: int = 2000
    deterministic: bool = True
    seed: int = 2024

    def __post_init__(self) -> None:
        for name in ("num_seeds", "rollouts_per_seed", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"eval.{name}", f"must be >= 1, got {getattr(self, name)}")
        if self.bootstrap_samples < 100:
            raise ConfigError(
                "eval.bootstrap_samples", f"must be >= 100, got {self.bootstrap_samples}"
            )


@dataclass(frozen=True)
class SearchConfig:
    n_configs: int = 30
    seeds_per_config: int = 3
    validation_seed: int = 3
    validation_horizon: int = 60
    trial_steps: int = 100_000
    search_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_configs", "seeds_per_config", "validation_horizon", "trial_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"search.{name}", f"must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class InterpretConfig:
    grid_points: int = 256
    density_bins: int = 32
    num_rollouts: int = 50
    seed: int = 7

    def __post_init__(self) -> None:
        if self.grid_points < 2:
            raise ConfigError("interpret.grid_points", f"must be >= 2, got {self.grid_points}")
        if self.density_bins < 1:
            raise ConfigError("interpret.density_bins", f"must be >= 1, got {self.density_bins}")
        if self.num_rollouts < 1:
            raise ConfigError("interpret.num_rollouts", f"must be >= 1, got {self.num_rollouts}")


@dataclass(frozen=True)
class ExperimentConfig:
    workers: int = 1
    stability_horizons: tuple[int, ...] = (30, 60, 120, 180, 240, 300, 360, 420)
    disruption_strengths: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 4.0)
    # None: half the evaluation horizon.
    disruption_start: int | None = None
    hardened_strength: float = 1.0
    hardened_start: int = 30
    hardened_seeds: int = 5

    def __post_init__(self) -> None:
        horizons = tuple(int(h) for h in self.stability_horizons)
        strengths = tuple(float(s) for s in self.disruption_strengths)
        object.__setattr__(self, "stability_horizons", horizons)
        object.__setattr__(self, "disruption_strengths", strengths)
        for name in ("workers", "hardened_seeds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"experiment.{name}", f"must be >= 1, got {getattr(self, name)}")
        for name in ("hardened_strength", "hardened_start", "disruption_start"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"experiment.{name}", f"must be >= 0, got {value}")
        if not horizons or min(horizons) < 1:
            raise ConfigError("experiment.stability_horizons", "must list positive horizons")
        if not strengths or min(strengths) < 0:
            raise ConfigError("experiment.disruption_strengths", "must list strengths >= 0")


@dataclass(frozen=True)
class RunConfig:
    env: SupplyChainConfig = field(default_factory=SupplyChainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    interpret: InterpretConfig = field(default_factory=InterpretConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)


SECTIONS: dict[str, type] = {
    f.name: f.default_factory for f in dataclasses.fields(RunConfig)  # type: ignore[misc]
}


def _coerce_numbers(cls: type, kwargs: dict[str, Any], prefix: str) -> dict[str, Any]:
    """Bring scalar values onto their field's declared ``int`` or ``float`` type."""

    hints = typing.get_type_hints(cls)
    for name, value in kwargs.items():
        hint = hints.get(name)
        optional = [a for a in typing.get_args(hint) if a is not type(None)]
        if len(optional) == 1:
            hint = optional[0]
        if hint not in (int, float) or value is None or isinstance(value, bool):
            continue
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{prefix}.{name}", f"expected a number, got {value!r}") from None
        if hint is int and isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{prefix}.{name}", f"expected an integer, got {value!r}")
            value = int(value)
        elif hint is float and isinstance(value, int):
            value = float(value)
        kwargs[name] = value
    return kwargs


def _build(cls: type, data: Any, prefix: str) -> Any:
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(prefix, f"expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        allowed = ", ".join(sorted(known))
        raise ConfigError(f"{prefix}.{unknown[0]}", f"unknown key (allowed: {allowed})")
    kwargs = _coerce_numbers(cls, dict(data), prefix)
    if cls is SupplyChainConfig and "demand" in kwargs:
        kwargs["demand"] = _build(DemandConfig, kwargs["demand"], f"{prefix}.demand")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(prefix, str(e)) from e


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(unknown[0], f"unknown section (allowed: {', '.join(SECTIONS)})")
    return RunConfig(**{name: _build(cls, raw.get(name), name) for name, cls in SECTIONS.items()})


def apply_overrides(raw: Mapping[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Return a copy of ``raw`` with ``section.key=value`` overrides applied."""

    out = copy.deepcopy(dict(raw))
    for item in overrides:
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or not key or "." not in key:
            raise ConfigError(item, "override must look like 'section.key=value'")
        try:
            value = _parse_yaml(text)
        except yaml.YAMLError as e:
            raise ConfigError(key, f"cannot parse override value {text!r}: {e}") from e
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError(key, f"'{part}' is not a section")
            node = child
        node[parts[-1]] = value
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    raw: Any = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            raw = _parse_yaml(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(str(path), f"invalid YAML: {e}") from e
        if not isinstance(raw, Mapping):
            raise ConfigError(str(path), "top level must be a mapping of sections")
    return config_from_dict(apply_overrides(raw, overrides))


def to_plain(obj: Any) -> Any:
    """Dataclasses/tuples/numpy scalars -> JSON-compatible builtins."""

    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = dataclasses.asdict(obj)
    return json.loads(json.dumps(obj, default=_json_default))


def _json_default(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return dataclasses.asdict(value)
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "item"):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def config_digest(obj: Any) -> str:
    """sha256 of the canonical JSON form of ``obj``."""

    canonical = json.dumps(to_plain(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(to_plain(cfg), sort_keys=True), encoding="utf-8")
    return path
