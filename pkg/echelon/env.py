"""Linear multi-echelon inventory chain with backlog, lead times and Poisson demand.

Stages are indexed from the customer upwards: stage 0 is the retailer, stage
``num_stages - 1`` the top supplier, which orders from an infinite source.

Each call to :func:`env_step` for period ``t`` runs, in order:

1. Orders are clipped to ``[0, capacities[i]]`` and then to the supplier's
   on-hand inventory (the top stage is never supply-clipped). The supplier's
   inventory is decremented at once and the order enters the pipeline with
   arrival period ``t + lead_times[i]``.
2. Customer demand is drawn; the retailer ships ``min(inventory, demand + backlog)``
   and the remainder is carried as backlog.
3. Profit per stage is ``price[i] * shipped[i] - price[i+1] * ordered[i]
   - holding[i] * inventory[i]``; the reward is the sum of stage profits minus
   ``backlog_cost * backlog``. The simulator applies no discounting.
4. The executed orders are shifted into the action history, ``t`` increments,
   and pipeline entries due at the new ``t`` are delivered (start of period).

The observation is ``[I_0, ..., I_{n-1}, a(t-L), ..., a(t-1)]`` with the most
recent executed order vector last.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Protocol, Sequence

import gymnasium as gym  # type: ignore
import numpy as np
from gymnasium import spaces  # type: ignore

from echelon.errors import ConfigError, ContractError, ProtocolError

if TYPE_CHECKING:  # pragma: no cover
    import pandas as pd  # type: ignore

logger = logging.getLogger(__name__)


def _as_tuple(value: Any, cast: type) -> tuple:
    if np.isscalar(value):
        return (cast(value),)
    return tuple(cast(v) for v in value)


@dataclass(frozen=True)
class DemandConfig:
    base_lambda: float = 20.0
    disruption_strength: float = 0.0
    disruption_start: int | None = None
    attenuation: float = 0.8

    def __post_init__(self) -> None:
        if not self.base_lambda > 0:
            raise ConfigError("env.demand.base_lambda", f"must be > 0, got {self.base_lambda}")
        if not self.disruption_strength >= 0:
            raise ConfigError(
                "env.demand.disruption_strength", f"must be >= 0, got {self.disruption_strength}"
            )
        if self.disruption_start is not None and self.disruption_start < 0:
            raise ConfigError(
                "env.demand.disruption_start", f"must be >= 0, got {self.disruption_start}"
            )
        if not 0 < self.attenuation < 1:
            raise ConfigError(
                "env.demand.attenuation", f"must be in (0, 1), got {self.attenuation}"
            )

    @property
    def disrupted(self) -> bool:
        return self.disruption_start is not None and self.disruption_strength > 0


@dataclass(frozen=True)
class SupplyChainConfig:
    num_stages: int = 3
    init_inv_mean: tuple[float, ...] = (100.0, 100.0, 200.0)
    init_inv_std: float = 50.0
    lead_times: tuple[int, ...] = (3, 5, 10)
    capacities: tuple[int, ...] = (100, 90, 80)
    unit_price: tuple[float, ...] = (2.00, 1.50, 1.00, 0.75)
    holding_cost: tuple[float, ...] = (0.150, 0.100, 0.050)
    backlog_cost: float = 0.100
    horizon: int = 60
    action_history_len: int = 10
    demand: DemandConfig = field(default_factory=DemandConfig)

    def __post_init__(self) -> None:
        # Accept lists from YAML; store tuples so the config stays hashable.
        object.__setattr__(self, "init_inv_mean", _as_tuple(self.init_inv_mean, float))
        object.__setattr__(self, "lead_times", _as_tuple(self.lead_times, int))
        object.__setattr__(self, "capacities", _as_tuple(self.capacities, int))
        object.__setattr__(self, "unit_price", _as_tuple(self.unit_price, float))
        object.__setattr__(self, "holding_cost", _as_tuple(self.holding_cost, float))
        if isinstance(self.demand, dict):
            object.__setattr__(self, "demand", DemandConfig(**self.demand))
        self.validate()

    def validate(self) -> None:
        n = self.num_stages
        if n < 1:
            raise ConfigError("env.num_stages", f"must be >= 1, got {n}")
        for name in ("init_inv_mean", "lead_times", "capacities", "holding_cost"):
            got = len(getattr(self, name))
            if got != n:
                raise ConfigError(f"env.{name}", f"expected {n} entries (num_stages), got {got}")
        if len(self.unit_price) != n + 1:
            got = len(self.unit_price)
            raise ConfigError(
                "env.unit_price", f"expected {n + 1} entries (num_stages + 1), got {got}"
            )
        for name in ("lead_times", "capacities", "unit_price", "holding_cost"):
            vals = getattr(self, name)
            if any(not v > 0 for v in vals):
                raise ConfigError(f"env.{name}", f"all entries must be > 0, got {list(vals)}")
        if not self.backlog_cost > 0:
            raise ConfigError("env.backlog_cost", f"must be > 0, got {self.backlog_cost}")
        if any(b >= a for a, b in zip(self.unit_price, self.unit_price[1:])):
            prices = list(self.unit_price)
            raise ConfigError(
                "env.unit_price", f"must be strictly decreasing upstream, got {prices}"
            )
        if any(v < 0 for v in self.init_inv_mean):
            means = list(self.init_inv_mean)
            raise ConfigError("env.init_inv_mean", f"entries must be >= 0, got {means}")
        if not self.init_inv_std >= 0:
            raise ConfigError("env.init_inv_std", f"must be >= 0, got {self.init_inv_std}")
        if self.horizon < 1:
            raise ConfigError("env.horizon", f"must be >= 1, got {self.horizon}")
        if self.action_history_len < 1:
            raise ConfigError(
                "env.action_history_len", f"must be >= 1, got {self.action_history_len}"
            )

    @property
    def observation_size(self) -> int:
        return self.num_stages * (1 + self.action_history_len)

    def with_horizon(self, horizon: int) -> "SupplyChainConfig":
        return replace(self, horizon=int(horizon))

    def with_disruption(self, strength: float, start: int | None) -> "SupplyChainConfig":
        return replace(
            self,
            demand=replace(
                self.demand, disruption_strength=float(strength), disruption_start=start
            ),
        )


@dataclass
class EnvState:
    t: int
    inventory: np.ndarray  # int64, shape (num_stages,)
    pipeline: list[deque]  # per stage: FIFO of (arrival_period, quantity)
    backlog: int
    action_history: np.ndarray  # int64, shape (action_history_len, num_stages), oldest first

    def copy(self) -> "EnvState":
        return EnvState(
            t=self.t,
            inventory=self.inventory.copy(),
            pipeline=[deque(q) for q in self.pipeline],
            backlog=self.backlog,
            action_history=self.action_history.copy(),
        )

    def pipeline_totals(self) -> np.ndarray:
        return np.array([sum(q for _, q in stage) for stage in self.pipeline], dtype=np.int64)


@dataclass(frozen=True)
class StepInfo:
    sales_revenue: np.ndarray
    procurement_cost: np.ndarray
    holding_cost: np.ndarray
    backlog_cost: float
    demand: int
    fulfilled: int
    backlog: int
    arrivals: np.ndarray
    shipped: np.ndarray
    ordered: np.ndarray
    inventory: np.ndarray

    @property
    def profit(self) -> np.ndarray:
        return self.sales_revenue - self.procurement_cost - self.holding_cost

    def total(self) -> float:
        return float(np.sum(self.profit) - self.backlog_cost)

    def as_dict(self) -> dict[str, Any]:
        return {
            "sales_revenue": self.sales_revenue,
            "procurement_cost": self.procurement_cost,
            "holding_cost": self.holding_cost,
            "backlog_cost": self.backlog_cost,
            "demand": self.demand,
            "fulfilled": self.fulfilled,
            "backlog": self.backlog,
            "arrivals": self.arrivals,
            "shipped": self.shipped,
            "ordered": self.ordered,
            "inventory": self.inventory,
        }


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: StepInfo


def reset(config: SupplyChainConfig, rng: np.random.Generator) -> tuple[EnvState, np.ndarray]:
    """Start an episode with Gaussian-randomised, rounded and clamped inventories."""

    config.validate()
    n = config.num_stages
    draws = rng.normal(np.asarray(config.init_inv_mean, dtype=np.float64), config.init_inv_std)
    inventory = np.floor(np.maximum(draws, 0.0) + 0.5).astype(np.int64)
    state = EnvState(
        t=0,
        inventory=inventory,
        pipeline=[deque() for _ in range(n)],
        backlog=0,
        action_history=np.zeros((config.action_history_len, n), dtype=np.int64),
    )
    return state, build_observation(state, config)


def sample_demand(demand_cfg: DemandConfig, t: int, rng: np.random.Generator) -> int:
    """Draw customer demand for period ``t``.

    The disruption term is only drawn once the disruption is active, so an
    undisrupted configuration consumes exactly one Poisson draw per period.
    """

    if t < 0:
        raise ContractError(f"period must be >= 0, got {t}")
    base = int(rng.poisson(demand_cfg.base_lambda))
    if not demand_cfg.disrupted or t < demand_cfg.disruption_start:
        return base
    raw = rng.poisson(demand_cfg.disruption_strength * demand_cfg.base_lambda)
    extra = int(np.floor(raw * demand_cfg.attenuation ** (t - demand_cfg.disruption_start) + 0.5))
    return base + extra


def build_observation(state: EnvState, config: SupplyChainConfig) -> np.ndarray:
    return np.concatenate(
        [state.inventory.astype(np.float64), state.action_history.astype(np.float64).ravel()]
    )


def _check_action(action: Any, n: int) -> np.ndarray:
    a = np.asarray(action)
    if a.shape != (n,):
        raise ContractError(f"action must have shape ({n},), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"action entries must be finite, got {a.tolist()}")
    if np.any(a < 0):
        raise ContractError(f"action entries must be >= 0, got {a.tolist()}")
    if np.any(a != np.floor(a)):
        raise ContractError(f"action entries must be integers, got {a.tolist()}")
    return a.astype(np.int64)


def env_step(
    state: EnvState,
    action: Sequence[int] | np.ndarray,
    config: SupplyChainConfig,
    rng: np.random.Generator,
    *,
    demand: int | None = None,
) -> tuple[EnvState, StepResult]:
    """Advance one period. ``demand`` forces the customer demand instead of sampling it."""

    if state.t >= config.horizon:
        raise ProtocolError(
            f"episode is done (t={state.t}, horizon={config.horizon}); call reset()"
        )
    n = config.num_stages
    orders = np.minimum(_check_action(action, n), np.asarray(config.capacities, dtype=np.int64))

    nxt = state.copy()
    inv = nxt.inventory
    t = nxt.t

    # (1) supply clipping and order placement
    for i in range(n):
        if i + 1 < n:
            orders[i] = min(orders[i], inv[i + 1])
            inv[i + 1] -= orders[i]
        if orders[i] > 0:
            nxt.pipeline[i].append((t + config.lead_times[i], int(orders[i])))

    # (2) customer demand at the retailer
    if demand is None:
        d = sample_demand(config.demand, t, rng)
    else:
        if demand < 0:
            raise ContractError(f"forced demand must be >= 0, got {demand}")
        d = int(demand)
    owed = d + nxt.backlog
    fulfilled = int(min(inv[0], owed))
    inv[0] -= fulfilled
    nxt.backlog = owed - fulfilled

    # (3) accounting
    price = np.asarray(config.unit_price, dtype=np.float64)
    shipped = np.concatenate([[fulfilled], orders[:-1]]).astype(np.int64)
    sales = price[:n] * shipped
    procurement = price[1:] * orders
    holding = np.asarray(config.holding_cost, dtype=np.float64) * inv
    backlog_pen = config.backlog_cost * nxt.backlog
    info_inventory = inv.copy()

    # (4) history, clock, start-of-period deliveries
    nxt.action_history = np.vstack([nxt.action_history[1:], orders[None, :]])
    nxt.t = t + 1
    arrivals = np.zeros(n, dtype=np.int64)
    for i, queue in enumerate(nxt.pipeline):
        while queue and queue[0][0] <= nxt.t:
            _, qty = queue.popleft()
            arrivals[i] += qty
    inv += arrivals

    info = StepInfo(
        sales_revenue=sales,
        procurement_cost=procurement,
        holding_cost=holding,
        backlog_cost=float(backlog_pen),
        demand=d,
        fulfilled=fulfilled,
        backlog=int(nxt.backlog),
        arrivals=arrivals,
        shipped=shipped,
        ordered=orders.copy(),
        inventory=info_inventory,
    )
    result = StepResult(
        observation=build_observation(nxt, config),
        reward=info.total(),
        done=nxt.t >= config.horizon,
        info=info,
    )
    return nxt, result


class Policy(Protocol):
    """Anything that maps an observation to integer order quantities."""

    def act(
        self, observation: np.ndarray, rng: np.random.Generator, deterministic: bool = True
    ) -> np.ndarray: ...


@dataclass
class EpisodeTrace:
    initial_inventory: np.ndarray
    rewards: np.ndarray
    infos: list[StepInfo]
    observations: np.ndarray  # observations the policy acted on, one per period
    final_state: EnvState

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))

    def to_frame(self) -> "pd.DataFrame":
        """One row per (period, stage); period-level columns are set on the stage-0 row."""

        try:
            import pandas as pd  # type: ignore
        except Exception as e:  # pragma: no cover
            raise ImportError(
                f"Episode trace export requires the optional dependency 'pandas'. ({e})"
            ) from e

        rows: list[dict[str, Any]] = []
        for period, info in enumerate(self.infos):
            profit = info.profit
            for stage in range(len(info.ordered)):
                first = stage == 0
                rows.append(
                    {
                        "period": period,
                        "stage": stage,
                        "ordered": int(info.ordered[stage]),
                        "shipped": int(info.shipped[stage]),
                        "arrivals": int(info.arrivals[stage]),
                        "inventory": int(info.inventory[stage]),
                        "sales_revenue": float(info.sales_revenue[stage]),
                        "procurement_cost": float(info.procurement_cost[stage]),
                        "holding_cost": float(info.holding_cost[stage]),
                        "profit": float(profit[stage]),
                        "demand": info.demand if first else 0,
                        "fulfilled": info.fulfilled if first else 0,
                        "backlog": info.backlog if first else 0,
                        "backlog_cost": info.backlog_cost if first else 0.0,
                    }
                )
        return pd.DataFrame(rows)


def run_episode(
    policy: Policy,
    config: SupplyChainConfig,
    rng: np.random.Generator,
    *,
    deterministic: bool = True,
    policy_rng: np.random.Generator | None = None,
    demand: int | None = None,
) -> EpisodeTrace:
    """Roll one full episode; ``demand`` forces a constant customer demand every period."""

    state, obs = reset(config, rng)
    initial = state.inventory.copy()
    act_rng = policy_rng if policy_rng is not None else rng
    rewards = np.zeros(config.horizon, dtype=np.float64)
    observations = np.zeros((config.horizon, config.observation_size), dtype=np.float64)
    infos: list[StepInfo] = []
    done = False
    while not done:
        observations[state.t] = obs
        action = policy.act(obs, act_rng, deterministic)
        t = state.t
        state, res = env_step(state, action, config, rng, demand=demand)
        rewards[t] = res.reward
        infos.append(res.info)
        obs, done = res.observation, res.done
    return EpisodeTrace(
        initial_inventory=initial,
        rewards=rewards,
        infos=infos,
        observations=observations,
        final_state=state,
    )


class SupplyChainEnv(gym.Env):
    """gymnasium adapter over :func:`reset` / :func:`env_step`.

    The horizon is a time limit, so the final step reports ``truncated=True``.
    """

    metadata = {"render_modes": []}

    def __init__(
        self, config: SupplyChainConfig | None = None, rng: np.random.Generator | None = None
    ):
        super().__init__()
        self.config = config or SupplyChainConfig()
        caps = np.asarray(self.config.capacities, dtype=np.int64)
        self.action_space = spaces.Box(low=np.zeros_like(caps), high=caps, dtype=np.int64)
        cfg = self.config
        hi = float(max(cfg.capacities)) * (cfg.horizon + 1) + sum(cfg.init_inv_mean)
        self.observation_space = spaces.Box(
            low=0.0, high=hi, shape=(self.config.observation_size,), dtype=np.float64
        )
        if rng is not None:
            self.np_random = rng
        self.state: EnvState | None = None

    def reset(self, *, seed: int | None = None, options: dict | None = None):
        super().reset(seed=seed)
        self.state, obs = reset(self.config, self.np_random)
        return obs, {}

    def step(self, action):
        if self.state is None:
            raise ProtocolError("step() called before reset()")
        self.state, res = env_step(self.state, action, self.config, self.np_random)
        return res.observation, res.reward, False, res.done, res.info.as_dict()
