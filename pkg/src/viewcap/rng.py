"""Deterministic derivation of independent random streams from one run seed.

Every stochastic stage of a run (parameter init, data order, loss-time noise,
sampling, corpus generation) owns a stream derived from ``(seed, *tags)`` so
that streams never alias and any stage can be reproduced in isolation.
"""

from __future__ import annotations

import numpy as np
import torch

__all__ = [
    "TAG_INIT",
    "TAG_DATA",
    "TAG_LOSS",
    "TAG_SAMPLE",
    "TAG_DATAGEN",
    "TAG_POOL",
    "derive_seed",
    "torch_generator",
    "numpy_rng",
]

TAG_INIT = 1
TAG_DATA = 2
TAG_LOSS = 3
TAG_SAMPLE = 4
TAG_DATAGEN = 5
TAG_POOL = 6


def derive_seed(seed: int, *tags: int) -> int:
    """A 63-bit integer seed derived from the run seed and integer tags."""
    ss = np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(seed: int, *tags: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *tags))
    return gen


def numpy_rng(seed: int, *tags: int) -> np.random.Generator:
    ss = np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags))
    return np.random.default_rng(ss)
