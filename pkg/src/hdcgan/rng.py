"""Named, checkpointable random streams.

A stream is identified by ``(algorithm, seed, sequence)``; equal identities
give equal number streams on every platform numpy supports, because PCG64
and ``SeedSequence`` are specified bit-for-bit.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "pcg64"


class RngStream:
    """A PCG64 generator keyed by a 64-bit seed and a stream counter."""

    def __init__(self, seed: int = 0, sequence: int = 0, algorithm: str = ALGORITHM):
        if algorithm != ALGORITHM:
            raise ValueError(f"unsupported RNG algorithm {algorithm!r}")
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.algorithm = algorithm
        self.seed = int(seed)
        self.sequence = int(sequence)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.sequence,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, sequence={self.sequence})"

    def spawn(self, sequence: int) -> "RngStream":
        """Independent stream sharing this seed."""
        return RngStream(self.seed, sequence, self.algorithm)

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator.standard_normal(shape, dtype=dtype)

    def uniform(self, shape=None) -> np.ndarray:
        return self.generator.random(shape)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def get_state(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "sequence": self.sequence,
            "bit_generator": self.generator.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["sequence"], state["algorithm"])
        rng.generator.bit_generator.state = state["bit_generator"]
        return rng


def as_stream(rng) -> RngStream:
    """Coerce ``None``/int/``RngStream`` into a stream."""
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError(f"cannot build an RngStream from {type(rng).__name__}")
