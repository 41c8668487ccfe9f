"""Counter-based random number streams keyed by (seed, partition, epoch, layer, phase).

Every source of randomness in a training run is derived from the global seed
plus a structural key, so runs replay bit-identically no matter how worker
threads interleave. Streams are backed by Philox, which is counter-based and
platform-stable.
"""

from __future__ import annotations

import hashlib

import numpy as np

FORWARD = "forward"
BACKWARD = "backward"


def _derive_key(parts: tuple) -> np.ndarray:
    """Hash a structural key tuple down to a 128-bit Philox key."""
    text = "\x1f".join(str(p) for p in parts).encode()
    digest = hashlib.blake2b(text, digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64)


class RngStream:
    """Single-owner uniform stream for one (partition, epoch, layer, phase) slot.

    Identical keys produce identical sequences across runs and platforms.
    """

    def __init__(self, global_seed: int, partition: int, epoch: int, layer: int,
                 phase: str):
        self.key = (global_seed, partition, epoch, layer, phase)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.key)))

    def uniforms(self, n: int) -> np.ndarray:
        """Next n uniforms in [0, 1)."""
        return self._gen.random(n)


def keyed_generator(*parts) -> np.random.Generator:
    """General-purpose deterministic generator for non-stream uses
    (weight init, dropout masks, dataset synthesis)."""
    return np.random.Generator(np.random.Philox(key=_derive_key(tuple(parts))))
