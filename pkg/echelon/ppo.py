"""Clipped PPO with GAE over fixed-size rollouts.

One update = collect ``n_steps`` transitions with the current (frozen) policy,
compute advantages with GAE, then run ``n_epochs`` passes of shuffled
minibatches through the clipped surrogate loss. Episodes that end at the
horizon are treated as terminal: no bootstrapping across ``done``.

Random streams (see :mod:`echelon.seeding`):

- episode ``k`` of the training run uses ``stream(seed, ENV, k)``;
- action sampling uses ``stream(seed, TRAIN, 0)``;
- minibatch shuffling uses ``stream(seed, TRAIN, 1)``;
- network initialisation uses ``derive_seed(seed, INIT)``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterator, Union

import numpy as np
import torch
from torch.distributions import Normal

from echelon import seeding
from echelon.env import SupplyChainConfig, env_step, reset
from echelon.errors import ConfigError, ContractError, TrainingError
from echelon.netcore import Adam, GradientTape, as_tensor, backward, make_generator
from echelon.policy import (
    PolicyCheckpoint,
    PolicyConfig,
    Standardizer,
    build_actor,
    build_critic,
    gaussian_action,
    to_env_action,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    n_steps: int = 2048
    n_epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 3e-4
    total_steps: int = 300_000
    max_grad_norm: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.clip_eps < 1:
            raise ConfigError("ppo.clip_eps", f"must be in (0, 1), got {self.clip_eps}")
        if not 0 < self.gamma <= 1:
            raise ConfigError("ppo.gamma", f"must be in (0, 1], got {self.gamma}")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("ppo.gae_lambda", f"must be in [0, 1], got {self.gae_lambda}")
        if self.ent_coef < 0:
            raise ConfigError("ppo.ent_coef", f"must be >= 0, got {self.ent_coef}")
        if self.vf_coef < 0:
            raise ConfigError("ppo.vf_coef", f"must be >= 0, got {self.vf_coef}")
        if self.n_steps < 1:
            raise ConfigError("ppo.n_steps", f"must be >= 1, got {self.n_steps}")
        if self.n_epochs < 1:
            raise ConfigError("ppo.n_epochs", f"must be >= 1, got {self.n_epochs}")
        if not 1 <= self.batch_size <= self.n_steps:
            raise ConfigError(
                "ppo.batch_size", f"must be in [1, n_steps={self.n_steps}], got {self.batch_size}"
            )
        if not self.learning_rate > 0:
            raise ConfigError("ppo.learning_rate", f"must be > 0, got {self.learning_rate}")
        if self.total_steps < 1:
            raise ConfigError("ppo.total_steps", f"must be >= 1, got {self.total_steps}")
        if not self.max_grad_norm > 0:
            raise ConfigError("ppo.max_grad_norm", f"must be > 0, got {self.max_grad_norm}")

    @property
    def num_updates(self) -> int:
        return max(1, math.ceil(self.total_steps / self.n_steps))


@dataclass
class Minibatch:
    observations: torch.Tensor
    actions: torch.Tensor
    old_log_probs: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor

    def __len__(self) -> int:
        return int(self.observations.shape[0])


class TrajectoryBuffer:
    """Fixed-capacity store of one rollout; ``done[t]`` means the episode ended after step ``t``."""

    def __init__(self, size: int, obs_dim: int, act_dim: int):
        if size < 1:
            raise ContractError(f"buffer size must be >= 1, got {size}")
        self.size = int(size)
        self.observations = np.zeros((size, obs_dim), dtype=np.float64)
        self.actions = np.zeros((size, act_dim), dtype=np.float64)
        self.log_probs = np.zeros(size, dtype=np.float64)
        self.rewards = np.zeros(size, dtype=np.float64)
        self.values = np.zeros(size, dtype=np.float64)
        self.dones = np.zeros(size, dtype=bool)
        self.advantages: np.ndarray | None = None
        self.returns: np.ndarray | None = None
        self.ptr = 0

    def __len__(self) -> int:
        return self.ptr

    @property
    def full(self) -> bool:
        return self.ptr >= self.size

    def reset(self) -> None:
        self.ptr = 0
        self.advantages = None
        self.returns = None

    def add(
        self, observation, action, log_prob: float, reward: float, value: float, done: bool
    ) -> None:
        if self.full:
            raise ContractError(f"buffer is full ({self.size} steps)")
        i = self.ptr
        self.observations[i] = observation
        self.actions[i] = action
        self.log_probs[i] = log_prob
        self.rewards[i] = reward
        self.values[i] = value
        self.dones[i] = done
        self.ptr += 1

    def finalize(self, gamma: float, gae_lambda: float, last_value: float) -> None:
        self.advantages, self.returns = compute_gae(self, gamma, gae_lambda, last_value)

    def minibatches(self, batch_size: int, rng: np.random.Generator) -> Iterator[Minibatch]:
        if self.advantages is None or self.returns is None:
            raise ContractError("call finalize() before drawing minibatches")
        order = rng.permutation(self.ptr)
        for start in range(0, self.ptr, batch_size):
            idx = order[start : start + batch_size]
            yield Minibatch(
                observations=as_tensor(self.observations[idx]),
                actions=as_tensor(self.actions[idx]),
                old_log_probs=as_tensor(self.log_probs[idx]),
                advantages=as_tensor(self.advantages[idx]),
                returns=as_tensor(self.returns[idx]),
            )


def compute_gae(
    buffer: TrajectoryBuffer, gamma: float, gae_lambda: float, last_value: float
) -> tuple[np.ndarray, np.ndarray]:
    """GAE advantages and returns (``advantage + value``) for the filled part of ``buffer``.

    ``last_value`` bootstraps the step after the buffer end unless that step ended an episode.
    """

    n = len(buffer)
    if n == 0:
        raise ContractError("cannot compute advantages of an empty buffer")
    rewards = buffer.rewards[:n]
    values = buffer.values[:n]
    dones = buffer.dones[:n]
    adv = np.zeros(n, dtype=np.float64)
    gae = 0.0
    for t in reversed(range(n)):
        nonterminal = 0.0 if dones[t] else 1.0
        next_value = last_value if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        gae = delta + gamma * gae_lambda * nonterminal * gae
        adv[t] = gae
    return adv, adv + values


def normalize_advantages(adv: torch.Tensor) -> torch.Tensor:
    if adv.numel() < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_loss(
    batch: Minibatch,
    new_log_probs: torch.Tensor,
    entropies: torch.Tensor,
    new_values: torch.Tensor,
    cfg: PpoConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Clipped surrogate + value MSE - entropy bonus, with diagnostics.

    ``batch.advantages`` are used as given; normalise them beforehand.
    """

    log_ratio = new_log_probs - batch.old_log_probs
    ratio = torch.exp(log_ratio)
    if not torch.isfinite(ratio).all():
        raise TrainingError("non-finite probability ratio in PPO loss")
    adv = batch.advantages
    surr1 = ratio * adv
    surr2 = torch.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    policy_loss = -torch.min(surr1, surr2).mean()
    value_loss = ((new_values - batch.returns) ** 2).mean()
    entropy = entropies.mean()
    loss = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy

    with torch.no_grad():
        clip_fraction = ((ratio - 1.0).abs() > cfg.clip_eps).to(ratio.dtype).mean()
        approx_kl = ((ratio - 1.0) - log_ratio).mean()
    diagnostics = {
        "loss": float(loss.detach()),
        "policy_loss": float(policy_loss.detach()),
        "value_loss": float(value_loss.detach()),
        "entropy": float(entropy.detach()),
        "clip_fraction": float(clip_fraction),
        "approx_kl": float(approx_kl),
    }
    return loss, diagnostics


@dataclass
class TrainingResult:
    checkpoint: PolicyCheckpoint
    log: list[dict[str, Any]] = field(default_factory=list)
    episode_returns: list[float] = field(default_factory=list)


EnvSource = Union[SupplyChainConfig, Callable[[], SupplyChainConfig]]


def _resolve_env(env: EnvSource) -> SupplyChainConfig:
    cfg = env() if callable(env) else env
    if not isinstance(cfg, SupplyChainConfig):
        raise ContractError(
            f"env factory must produce a SupplyChainConfig, got {type(cfg).__name__}"
        )
    return cfg


def _snapshot(
    actor,
    critic,
    standardizer: Standardizer,
    env_cfg: SupplyChainConfig,
    policy_cfg: PolicyConfig,
    meta: dict,
) -> PolicyCheckpoint:
    return PolicyCheckpoint(
        actor=copy.deepcopy(actor),
        critic=copy.deepcopy(critic),
        standardizer=standardizer,
        env_config=env_cfg,
        policy_config=policy_cfg,
        metadata=dict(meta),
    )


def train(
    env: EnvSource,
    kind: str,
    ppo_cfg: PpoConfig,
    policy_cfg: PolicyConfig,
    seed: int,
    *,
    log_path: str | Path | None = None,
) -> TrainingResult:
    """Train an actor of the given ``kind`` ('nam' or 'mlp') and return the final checkpoint.

    Raises :class:`TrainingError` carrying the last finite checkpoint if the
    loss or gradients become non-finite.
    """

    env_cfg = _resolve_env(env)
    policy_cfg = replace(policy_cfg, kind=kind)
    std = Standardizer.for_config(env_cfg)
    n_obs, n_act = env_cfg.observation_size, env_cfg.num_stages

    gen = make_generator(seeding.derive_seed(seed, seeding.INIT))
    actor = build_actor(policy_cfg, n_obs, n_act, generator=gen)
    critic = build_critic(policy_cfg, n_obs, generator=gen)
    params = {f"actor.{n}": p for n, p in actor.named_parameters()}
    params.update({f"critic.{n}": p for n, p in critic.named_parameters()})
    optimizer = Adam(params, ppo_cfg.learning_rate, max_grad_norm=ppo_cfg.max_grad_norm)

    act_rng = seeding.stream(seed, seeding.TRAIN, 0)
    shuffle_rng = seeding.stream(seed, seeding.TRAIN, 1)
    episode = 0
    env_rng = seeding.stream(seed, seeding.ENV, episode)
    state, obs = reset(env_cfg, env_rng)
    ep_return = 0.0

    buffer = TrajectoryBuffer(ppo_cfg.n_steps, n_obs, n_act)
    meta: dict[str, Any] = {
        "seed": int(seed),
        "timesteps": 0,
        "updates": 0,
        "ppo_config": asdict(ppo_cfg),
    }
    last_good = _snapshot(actor, critic, std, env_cfg, policy_cfg, meta)
    result = TrainingResult(checkpoint=last_good)
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w", encoding="utf-8")

    logger.info(
        "Training %s policy: seed=%d updates=%d n_steps=%d",
        kind,
        seed,
        ppo_cfg.num_updates,
        ppo_cfg.n_steps,
    )
    try:
        for update in range(ppo_cfg.num_updates):
            buffer.reset()
            finished: list[float] = []
            while not buffer.full:
                z = std.standardize_obs(obs)
                with torch.no_grad():
                    zt = as_tensor(z)
                    means = actor(zt)[0].numpy()
                    value = float(critic(zt)[0])
                log_std = actor.log_std.detach().numpy()
                sigma = np.exp(log_std)
                if not (np.all(np.isfinite(means)) and np.all(np.isfinite(sigma) & (sigma > 0))):
                    raise TrainingError(
                        f"degenerate action distribution during rollout of update {update}"
                    )
                raw, log_prob = gaussian_action(means, log_std, act_rng, "sample")
                state, res = env_step(state, to_env_action(raw, env_cfg, std), env_cfg, env_rng)
                buffer.add(z, raw, log_prob, res.reward, value, res.done)
                ep_return += res.reward
                if res.done:
                    finished.append(ep_return)
                    episode += 1
                    env_rng = seeding.stream(seed, seeding.ENV, episode)
                    state, obs = reset(env_cfg, env_rng)
                    ep_return = 0.0
                else:
                    obs = res.observation

            with torch.no_grad():
                last_value = float(critic(as_tensor(std.standardize_obs(obs)))[0])
            buffer.finalize(ppo_cfg.gamma, ppo_cfg.gae_lambda, last_value)

            sums: dict[str, float] = {}
            n_batches = 0
            for _ in range(ppo_cfg.n_epochs):
                for mb in buffer.minibatches(ppo_cfg.batch_size, shuffle_rng):
                    mb.advantages = normalize_advantages(mb.advantages)
                    means = actor(mb.observations)
                    if not bool(torch.isfinite(means).all()):
                        raise TrainingError(f"non-finite action means at update {update}")
                    dist = Normal(means, actor.log_std.exp())
                    new_log_probs = dist.log_prob(mb.actions).sum(-1)
                    entropies = dist.entropy().sum(-1)
                    values = critic(mb.observations)
                    loss, diag = ppo_loss(mb, new_log_probs, entropies, values, ppo_cfg)
                    if not math.isfinite(diag["loss"]):
                        raise TrainingError(f"non-finite PPO loss at update {update}")
                    grads = backward(GradientTape(loss, params))
                    diag["grad_norm"] = optimizer.step(grads)
                    for k, v in diag.items():
                        sums[k] = sums.get(k, 0.0) + float(v)
                    n_batches += 1

            result.episode_returns.extend(finished)
            meta = {**meta, "timesteps": (update + 1) * ppo_cfg.n_steps, "updates": update + 1}
            record: dict[str, Any] = {
                "update": update,
                "timesteps": meta["timesteps"],
                "episodes": len(finished),
                "mean_episode_return": float(np.mean(finished)) if finished else None,
                "learning_rate": optimizer.lr,
            }
            record.update({k: v / n_batches for k, v in sums.items()})
            if not (math.isfinite(record["approx_kl"]) and 0.0 <= record["clip_fraction"] <= 1.0):
                logger.warning("Update %d: unusual diagnostics %s", update, record)
            result.log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            last_good = _snapshot(actor, critic, std, env_cfg, policy_cfg, meta)
            mean_return = record["mean_episode_return"]
            logger.info(
                "update %d/%d: mean return %s, loss %.4g, clip %.3f, kl %.2e",
                update + 1,
                ppo_cfg.num_updates,
                "n/a" if mean_return is None else f"{mean_return:.2f}",
                record["loss"],
                record["clip_fraction"],
                record["approx_kl"],
            )
    except TrainingError as e:
        logger.warning("Training aborted after %d updates: %s", meta["updates"], e)
        raise TrainingError(str(e), parameter=e.parameter, checkpoint=last_good) from e
    finally:
        if log_file is not None:
            log_file.close()

    result.checkpoint = last_good
    return result
