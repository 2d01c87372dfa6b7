"""Deterministic noise streams for reproducible sampling.

Every draw is a pure function of (seed, labels, shape): a fresh Philox
generator is keyed per call, so chains and steps can be evaluated in any
order, on any number of workers, without changing a single bit of output.
The per-chain noise at step t is row i of the (n, d) block addressed by
(seed, STREAM_STEP, t).
"""

from __future__ import annotations

import numpy as np

# First label of a stream address. STREAM_STEP draws carry the step index
# as a second label.
STREAM_INIT = 0
STREAM_STEP = 1

# Labels used to derive per-chain seeds inside a coupled run.
CHAIN_A = 0
CHAIN_B = 1

_MAX_SEED = 2**64


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < _MAX_SEED:
        raise ValueError(f"seed must be a u64, got {seed}")
    return seed


class NoiseStream:
    """Counter-based source of standard-normal blocks."""

    def __init__(self, seed: int):
        self.seed = _check_seed(seed)

    def normal(self, shape, *labels: int) -> np.ndarray:
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(int(v) for v in labels)
        )
        return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


def derive_seed(seed: int, *labels: int) -> int:
    """Derive an independent u64 child seed from (seed, labels)."""
    ss = np.random.SeedSequence(
        entropy=_check_seed(seed), spawn_key=tuple(int(v) for v in labels)
    )
    return int(ss.generate_state(1, np.uint64)[0])


def generator(seed: int, *labels: int) -> np.random.Generator:
    """A full Generator keyed by (seed, labels), for categorical draws etc."""
    ss = np.random.SeedSequence(
        entropy=_check_seed(seed), spawn_key=tuple(int(v) for v in labels)
    )
    return np.random.Generator(np.random.Philox(ss))
