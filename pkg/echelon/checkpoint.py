"""HDF5 container for trained policies.

Layout::

    /actor/<param-name>     float64 dataset per actor tensor
    /critic/<param-name>    float64 dataset per critic tensor
    attrs["metadata"]       JSON document (format version, kind, architecture,
                            standardizer, env/policy config, free-form metadata)

h5py is imported lazily so the rest of the package works without it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch

from echelon.env import SupplyChainConfig
from echelon.errors import FormatError
from echelon.policy import PolicyCheckpoint, PolicyConfig, Standardizer, build_actor, build_critic

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _h5py():
    try:
        import h5py  # type: ignore
    except Exception as e:  # pragma: no cover
        raise ImportError(f"Checkpoint I/O requires the optional dependency 'h5py'. ({e})") from e
    return h5py


def env_config_to_dict(config: SupplyChainConfig) -> dict[str, Any]:
    d = asdict(config)
    return json.loads(json.dumps(d))  # tuples -> lists


def env_config_from_dict(d: dict[str, Any]) -> SupplyChainConfig:
    return SupplyChainConfig(**d)


def save_checkpoint(ckpt: PolicyCheckpoint, path: str | Path) -> Path:
    h5py = _h5py()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "architecture": ckpt.actor.architecture(),
        "critic_architecture": ckpt.critic.architecture(),
        "standardizer": ckpt.standardizer.to_dict(),
        "env_config": env_config_to_dict(ckpt.env_config),
        "policy_config": asdict(ckpt.policy_config),
        "metadata": ckpt.metadata,
    }
    with h5py.File(path, "w") as f:
        for group_name, module in (("actor", ckpt.actor), ("critic", ckpt.critic)):
            group = f.create_group(group_name)
            for name, tensor in module.state_dict().items():
                group.create_dataset(name, data=tensor.detach().cpu().numpy().astype(np.float64))
        f.attrs["metadata"] = json.dumps(meta, sort_keys=True)
    logger.debug("Saved %s checkpoint to %s", ckpt.kind, path)
    return path


def load_checkpoint(path: str | Path) -> PolicyCheckpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    h5py = _h5py()
    with h5py.File(path, "r") as f:
        raw = f.attrs.get("metadata")
        if raw is None:
            raise FormatError(f"Checkpoint has no metadata attribute (file: {path})")
        try:
            meta = json.loads(raw)
        except json.JSONDecodeError as e:
            raise FormatError(f"Checkpoint metadata is not valid JSON: {e} (file: {path})") from e
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(
                f"Unsupported checkpoint format {meta.get('format_version')!r} (file: {path})"
            )
        missing = [g for g in ("actor", "critic") if g not in f]
        if missing:
            raise FormatError(f"Checkpoint is missing groups {missing} (file: {path})")
        tensors = {
            g: {name: torch.from_numpy(np.array(ds, dtype=np.float64)) for name, ds in f[g].items()}
            for g in ("actor", "critic")
        }

    env_config = env_config_from_dict(meta["env_config"])
    pcfg = meta["policy_config"]
    policy_config = PolicyConfig(**pcfg)
    actor = build_actor(policy_config, env_config.observation_size, env_config.num_stages)
    critic = build_critic(policy_config, env_config.observation_size)
    for g, module in (("actor", actor), ("critic", critic)):
        try:
            module.load_state_dict(tensors[g], strict=True)
        except RuntimeError as e:
            raise FormatError(
                f"Checkpoint {g} parameters do not match the recorded architecture: {e} "
                f"(file: {path})"
            ) from e
    return PolicyCheckpoint(
        actor=actor,
        critic=critic,
        standardizer=Standardizer.from_dict(meta["standardizer"]),
        env_config=env_config,
        policy_config=policy_config,
        metadata=dict(meta.get("metadata") or {}),
    )
