"""Interpretable multi-echelon inventory control with PPO and neural additive models.

Imports are *lazy*: ``import echelon`` does not pull in torch, pandas, h5py or
matplotlib. Import what you need from the submodules:

    from echelon.env import SupplyChainConfig, run_episode
    from echelon.ppo import PpoConfig, train

or use the top-level names listed in ``__all__``.
"""

from __future__ import annotations

import importlib
from typing import Any

__version__ = "0.1.0"

__all__ = [
    "SupplyChainConfig",
    "DemandConfig",
    "SupplyChainEnv",
    "run_episode",
    "PolicyConfig",
    "PolicyCheckpoint",
    "PpoConfig",
    "train",
    "evaluate",
    "iqm",
    "bootstrap_ci",
    "trace_shape_functions",
    "feature_importance",
    "compile_lookup_policy",
    "save_checkpoint",
    "load_checkpoint",
    "load_config",
]


_LAZY_ATTRS = {
    "SupplyChainConfig": ("echelon.env", "SupplyChainConfig"),
    "DemandConfig": ("echelon.env", "DemandConfig"),
    "SupplyChainEnv": ("echelon.env", "SupplyChainEnv"),
    "run_episode": ("echelon.env", "run_episode"),
    "PolicyConfig": ("echelon.policy", "PolicyConfig"),
    "PolicyCheckpoint": ("echelon.policy", "PolicyCheckpoint"),
    "PpoConfig": ("echelon.ppo", "PpoConfig"),
    "train": ("echelon.ppo", "train"),
    "evaluate": ("echelon.evalstats", "evaluate"),
    "iqm": ("echelon.evalstats", "iqm"),
    "bootstrap_ci": ("echelon.evalstats", "bootstrap_ci"),
    "trace_shape_functions": ("echelon.interpret", "trace_shape_functions"),
    "feature_importance": ("echelon.interpret", "feature_importance"),
    "compile_lookup_policy": ("echelon.interpret", "compile_lookup_policy"),
    "save_checkpoint": ("echelon.checkpoint", "save_checkpoint"),
    "load_checkpoint": ("echelon.checkpoint", "load_checkpoint"),
    "load_config": ("echelon.config", "load_config"),
}


def __getattr__(name: str) -> Any:  # PEP 562
    if name not in _LAZY_ATTRS:
        raise AttributeError(name)
    mod_name, attr = _LAZY_ATTRS[name]
    mod = importlib.import_module(mod_name)
    return getattr(mod, attr)


def __dir__() -> list[str]:
    # Lazy names stay out of dir() so that attribute-walking tools do not
    # trigger the heavy imports.
    return sorted(set(list(globals().keys())))
