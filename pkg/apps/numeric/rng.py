"""
Counter-based deterministic random streams

Every stream is a numpy Philox generator keyed by (seed, stream key). Philox is a
counter-based generator: the n-th draw is a pure function of the key and n, so
identical seeds give bitwise-identical sample streams on every run. Child streams
derived with ``child()`` are independent of each other and of the parent.
"""

import zlib
from typing import Sequence, Union

import numpy as np

SEED_MASK = (1 << 64) - 1

StreamKey = Union[int, str]


def _key_part(part: StreamKey) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode('utf-8'))
    return int(part) & 0xFFFFFFFF


class Rng:
    """Seeded Philox stream with the handful of samplers the project needs"""

    def __init__(self, seed: int, stream: Sequence[StreamKey] = ()):
        self.seed = int(seed) & SEED_MASK
        self.stream = tuple(_key_part(part) for part in stream)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self) -> str:
        return f"<Rng seed={self.seed} stream={self.stream} counter={self.counter}>"

    @property
    def counter(self) -> tuple:
        return tuple(int(word) for word in self._generator.bit_generator.state['state']['counter'])

    def child(self, *keys: StreamKey) -> 'Rng':
        return Rng(self.seed, self.stream + tuple(_key_part(key) for key in keys))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._generator.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._generator.normal(0.0, scale, size=shape)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        return (self._generator.random(size=shape) < p).astype(np.float64)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def orthogonal(self, n: int) -> np.ndarray:
        """Haar-distributed orthogonal matrix (QR of a Gaussian with sign correction)"""
        q, r = np.linalg.qr(self.normal((n, n)))
        return q * np.sign(np.diag(r))
