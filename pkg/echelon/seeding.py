"""Counter-based random streams.

Each consumer (an environment episode, a network initialisation, a bootstrap)
owns a numpy ``Generator`` derived from ``SeedSequence(entropy=seed,
spawn_key=key)``. Streams are addressed by a tuple of integers rather than by
draw order, so parallel scheduling never changes results.
"""

from __future__ import annotations

import numpy as np

# Stream namespaces, used as the first spawn-key component.
ENV = 1
INIT = 2
TRAIN = 3
EVAL = 4
BOOTSTRAP = 5
SEARCH = 6
INTERPRET = 7


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator addressed by ``(seed, key)``."""

    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key: int) -> int:
    """Derive a 63-bit integer seed, e.g. for ``torch.Generator.manual_seed``."""

    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
