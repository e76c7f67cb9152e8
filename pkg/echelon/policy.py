"""Actors, critic, action head and observation standardization.

Two actors share one interface (``forward(x) -> means`` over standardized
observations plus a state-independent ``log_std`` per task):

- :class:`MlpActor`: one DenseNet ``N -> hidden... -> T``.
- :class:`NamActor`: multi-task neural additive model::

      y_t = beta_t + sum_i sum_s w[t, i, s] * f_{i,s}(x_i)

  with ``S`` subnets per feature shared by all tasks. Changing feature ``j``
  only changes the ``j``-indexed contributions.

Standardization uses fixed min-max bounds derived from the environment config
(not running statistics), mapping each feature range onto ``[-1, 1]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Literal, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy import stats

from echelon.env import SupplyChainConfig
from echelon.errors import ConfigError, ContractError
from echelon.netcore import DTYPE, DenseNet, SubnetBank, as_tensor

logger = logging.getLogger(__name__)

PolicyKind = Literal["nam", "mlp"]


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind = "nam"
    hidden_layers: int = 2
    hidden_width: int = 16
    num_subnets: int = 30
    critic_widths: tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        object.__setattr__(self, "critic_widths", tuple(int(w) for w in self.critic_widths))
        if self.kind not in ("nam", "mlp"):
            raise ConfigError("policy.kind", f"must be 'nam' or 'mlp', got {self.kind!r}")
        if self.hidden_layers < 1:
            raise ConfigError("policy.hidden_layers", f"must be >= 1, got {self.hidden_layers}")
        if self.hidden_width < 1:
            raise ConfigError("policy.hidden_width", f"must be >= 1, got {self.hidden_width}")
        if self.num_subnets < 1:
            raise ConfigError("policy.num_subnets", f"must be >= 1, got {self.num_subnets}")

    @property
    def hidden(self) -> tuple[int, ...]:
        return (self.hidden_width,) * self.hidden_layers


def feature_names(config: SupplyChainConfig) -> list[str]:
    n, hist = config.num_stages, config.action_history_len
    names = [f"I{i}" for i in range(n)]
    for k in range(hist):
        lag = hist - k
        names.extend(f"R{i}(t-{lag})" for i in range(n))
    return names


def task_names(config: SupplyChainConfig) -> list[str]:
    return [f"R{i}" for i in range(config.num_stages)]


@dataclass(frozen=True, eq=False)
class Standardizer:
    obs_offset: np.ndarray
    obs_scale: np.ndarray
    act_offset: np.ndarray
    act_scale: np.ndarray

    def __post_init__(self) -> None:
        for name in ("obs_scale", "act_scale"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ContractError(f"Standardizer.{name} must be > 0 everywhere")

    @classmethod
    def for_config(cls, config: SupplyChainConfig) -> "Standardizer":
        caps = np.asarray(config.capacities, dtype=np.float64)
        inv_hi = (
            np.asarray(config.init_inv_mean, dtype=np.float64)
            + 3.0 * config.init_inv_std
            + float(caps.sum())
        )
        obs_lo = np.zeros(config.observation_size)
        obs_hi = np.concatenate([inv_hi, np.tile(caps, config.action_history_len)])
        return cls(
            obs_offset=(obs_lo + obs_hi) / 2.0,
            obs_scale=(obs_hi - obs_lo) / 2.0,
            act_offset=caps / 2.0,
            act_scale=caps / 2.0,
        )

    def standardize_obs(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.obs_offset) / self.obs_scale

    def destandardize_obs(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.obs_scale + self.obs_offset

    def standardize_action(self, a: np.ndarray) -> np.ndarray:
        return (np.asarray(a, dtype=np.float64) - self.act_offset) / self.act_scale

    def destandardize_action(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.act_scale + self.act_offset

    def to_dict(self) -> dict[str, list[float]]:
        return {
            "obs_offset": self.obs_offset.tolist(),
            "obs_scale": self.obs_scale.tolist(),
            "act_offset": self.act_offset.tolist(),
            "act_scale": self.act_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Standardizer":
        keys = ("obs_offset", "obs_scale", "act_offset", "act_scale")
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in keys})


def _batch(x: torch.Tensor, width: int) -> torch.Tensor:
    if x.dim() == 1:
        x = x.unsqueeze(0)
    if x.shape[-1] != width:
        raise ContractError(f"expected {width} features, got {x.shape[-1]}")
    return x


class NamActor(nn.Module):
    kind = "nam"

    def __init__(
        self,
        num_features: int,
        num_tasks: int,
        hidden: Sequence[int],
        num_subnets: int = 30,
        *,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.num_features = int(num_features)
        self.num_tasks = int(num_tasks)
        self.num_subnets = int(num_subnets)
        self.hidden = tuple(int(h) for h in hidden)
        # Unit i * S + s is subnet f_{i,s}.
        units = self.num_features * self.num_subnets
        self.bank = SubnetBank(units, self.hidden, generator=generator)
        shape = (self.num_tasks, self.num_features, self.num_subnets)
        self.task_weights = nn.Parameter(torch.full(shape, 1.0 / self.num_subnets, dtype=DTYPE))
        self.task_bias = nn.Parameter(torch.zeros(self.num_tasks, dtype=DTYPE))
        self.log_std = nn.Parameter(torch.zeros(self.num_tasks, dtype=DTYPE))

    def subnet_outputs(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, N) -> (B, N, S)`` values of every ``f_{i,s}(x_i)``."""

        x = _batch(x, self.num_features)
        rep = x.repeat_interleave(self.num_subnets, dim=-1)
        return self.bank(rep).reshape(x.shape[0], self.num_features, self.num_subnets)

    def contributions(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, N) -> (B, T, N)`` per-task, per-feature contributions."""

        return torch.einsum("bns,tns->btn", self.subnet_outputs(x), self.task_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.task_bias + self.contributions(x).sum(-1)

    def feature_contribution(self, t: int, i: int, xi: torch.Tensor) -> torch.Tensor:
        """``f_{t,i}(x_i) = sum_s w[t, i, s] f_{i,s}(x_i)`` for a 1-D tensor of values."""

        if not 0 <= t < self.num_tasks:
            raise ContractError(f"task index {t} out of range [0, {self.num_tasks})")
        if not 0 <= i < self.num_features:
            raise ContractError(f"feature index {i} out of range [0, {self.num_features})")
        start = i * self.num_subnets
        f = self.bank.evaluate_units(start, start + self.num_subnets, xi)  # (B, S)
        return f @ self.task_weights[t, i]

    def architecture(self) -> dict:
        return {
            "type": "nam",
            "num_features": self.num_features,
            "num_tasks": self.num_tasks,
            "num_subnets": self.num_subnets,
            "hidden": list(self.hidden),
        }


class MlpActor(nn.Module):
    kind = "mlp"

    def __init__(
        self,
        num_features: int,
        num_tasks: int,
        hidden: Sequence[int],
        *,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.num_features = int(num_features)
        self.num_tasks = int(num_tasks)
        self.hidden = tuple(int(h) for h in hidden)
        self.net = DenseNet((self.num_features, *self.hidden, self.num_tasks), generator=generator)
        self.log_std = nn.Parameter(torch.zeros(self.num_tasks, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(_batch(x, self.num_features))

    def architecture(self) -> dict:
        return {
            "type": "mlp",
            "num_features": self.num_features,
            "num_tasks": self.num_tasks,
            "hidden": list(self.hidden),
        }


class Critic(nn.Module):
    def __init__(
        self,
        num_features: int,
        widths: Sequence[int] = (64, 64),
        *,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.num_features = int(num_features)
        self.net = DenseNet((self.num_features, *widths, 1), generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(_batch(x, self.num_features)).squeeze(-1)

    def architecture(self) -> dict:
        return {"type": "critic", "widths": list(self.net.widths)}


def build_actor(
    cfg: PolicyConfig,
    num_features: int,
    num_tasks: int,
    *,
    generator: torch.Generator | None = None,
) -> nn.Module:
    if cfg.kind == "nam":
        return NamActor(num_features, num_tasks, cfg.hidden, cfg.num_subnets, generator=generator)
    return MlpActor(num_features, num_tasks, cfg.hidden, generator=generator)


def build_critic(
    cfg: PolicyConfig, num_features: int, *, generator: torch.Generator | None = None
) -> Critic:
    return Critic(num_features, cfg.critic_widths, generator=generator)


def _finite_input(x: Any) -> torch.Tensor:
    t = as_tensor(x)
    if not torch.isfinite(t).all():
        raise ContractError("policy input contains non-finite values")
    return t


def nam_forward(actor: NamActor, x: np.ndarray) -> np.ndarray:
    """Task means for standardized input(s); ``(N,) -> (T,)`` or ``(B, N) -> (B, T)``."""

    t = _finite_input(x)
    with torch.no_grad():
        out = actor(t)
    return out[0].numpy() if t.dim() == 1 else out.numpy()


def task_shape_value(actor: NamActor, t: int, i: int, xi: float | np.ndarray) -> float | np.ndarray:
    """The exact contribution of feature ``i`` to task ``t`` used by :func:`nam_forward`."""

    scalar = np.isscalar(xi)
    with torch.no_grad():
        out = actor.feature_contribution(t, i, _finite_input(np.atleast_1d(xi)))
    return float(out[0]) if scalar else out.numpy()


def critic_value(critic: Critic, x: np.ndarray) -> float | np.ndarray:
    t = as_tensor(x)
    with torch.no_grad():
        out = critic(t)
    return float(out[0]) if t.dim() == 1 else out.numpy()


def gaussian_action(
    means: np.ndarray,
    log_std: np.ndarray,
    rng: np.random.Generator,
    mode: Literal["sample", "deterministic"] = "sample",
) -> tuple[np.ndarray, float]:
    """Sample (or take the mean of) a diagonal Gaussian; returns the raw action and log-density."""

    means = np.asarray(means, dtype=np.float64)
    if not np.all(np.isfinite(means)):
        raise ContractError("gaussian_action: means must be finite")
    std = np.exp(np.asarray(log_std, dtype=np.float64))
    if not np.all(np.isfinite(std) & (std > 0)):
        raise ContractError("gaussian_action: log_std must give a finite, positive std")
    if mode == "deterministic":
        raw = means.copy()
    elif mode == "sample":
        raw = means + std * rng.standard_normal(means.shape)
    else:
        raise ContractError(f"unknown action mode {mode!r}")
    log_prob = float(np.sum(stats.norm.logpdf(raw, loc=means, scale=std)))
    return raw, log_prob


def to_env_action(
    raw: np.ndarray, config: SupplyChainConfig, standardizer: Standardizer | None = None
) -> np.ndarray:
    """Destandardize, clip to ``[0, capacity]`` and round half up to integer orders."""

    std = standardizer or Standardizer.for_config(config)
    x = std.destandardize_action(raw)
    x = np.clip(x, 0.0, np.asarray(config.capacities, dtype=np.float64))
    return np.floor(x + 0.5).astype(np.int64)


@dataclass
class PolicyCheckpoint:
    """A trained actor/critic pair plus everything needed to act in the environment."""

    actor: nn.Module
    critic: Critic
    standardizer: Standardizer
    env_config: SupplyChainConfig
    policy_config: PolicyConfig
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.actor.kind

    def standardized_means(self, observation: np.ndarray) -> np.ndarray:
        """Raw actor output, in standardized action units."""

        z = self.standardizer.standardize_obs(observation)
        with torch.no_grad():
            out = self.actor(_finite_input(z))
        return out[0].numpy() if np.ndim(observation) == 1 else out.numpy()

    def means(self, observation: np.ndarray) -> np.ndarray:
        """Action means in order units, before clipping and rounding."""

        return self.standardizer.destandardize_action(self.standardized_means(observation))

    def act(
        self, observation: np.ndarray, rng: np.random.Generator, deterministic: bool = True
    ) -> np.ndarray:
        mode = "deterministic" if deterministic else "sample"
        log_std = self.actor.log_std.detach().numpy()
        raw, _ = gaussian_action(self.standardized_means(observation), log_std, rng, mode)
        return to_env_action(raw, self.env_config, self.standardizer)


class RandomPolicy:
    """Uniform integer orders in ``[0, capacity]``; the reference baseline."""

    def __init__(self, config: SupplyChainConfig):
        self.caps = np.asarray(config.capacities, dtype=np.int64)

    def act(
        self, observation: np.ndarray, rng: np.random.Generator, deterministic: bool = True
    ) -> np.ndarray:
        return rng.integers(0, self.caps + 1)


class BaseStockPolicy:
    """Order-up-to rule on echelon inventory position.

    The position of stage ``i`` is the on-hand plus in-transit stock of stages
    ``0..i``; in-transit stock is read from the action history (the last
    ``lead_time - 1`` executed orders), so lead times must not exceed
    ``action_history_len + 1``. Backlog is not observed and is ignored.
    """

    def __init__(self, config: SupplyChainConfig, levels: Sequence[float] | None = None):
        if max(config.lead_times) > config.action_history_len + 1:
            raise ConfigError(
                "env.lead_times", "base-stock policy needs lead times <= action_history_len + 1"
            )
        self.config = config
        if levels is None:
            levels = self.default_levels(config)
        self.levels = np.asarray(levels, dtype=np.float64)
        if self.levels.shape != (config.num_stages,):
            raise ContractError(
                f"expected {config.num_stages} base-stock levels, got {self.levels.shape}"
            )

    @staticmethod
    def default_levels(config: SupplyChainConfig) -> np.ndarray:
        """Cumulative expected demand over each stage's lead time plus one period."""

        lead = np.asarray(config.lead_times, dtype=np.float64)
        per_stage = config.demand.base_lambda * (lead + 1.0)
        return np.cumsum(per_stage)

    def act(
        self, observation: np.ndarray, rng: np.random.Generator, deterministic: bool = True
    ) -> np.ndarray:
        n, hist = self.config.num_stages, self.config.action_history_len
        obs = np.asarray(observation, dtype=np.float64)
        inventory = obs[:n]
        history = obs[n:].reshape(hist, n)
        transit = np.array(
            [
                history[hist - (L - 1):, i].sum() if L > 1 else 0.0
                for i, L in enumerate(self.config.lead_times)
            ]
        )
        position = np.cumsum(inventory + transit)
        caps = np.asarray(self.config.capacities, dtype=np.float64)
        orders = np.clip(self.levels - position, 0.0, caps)
        return np.floor(orders + 0.5).astype(np.int64)
