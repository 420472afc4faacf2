"""Reproducible, splittable random number streams.

A single experiment seed fans out into independent named streams, one per
consumer (data splits, weight init, token masking, dropout, batch order,
...). Two properties matter:

* the same (seed, label) pair always yields the same sequence, regardless
  of what other streams were drawn from or in what order;
* distinct labels yield statistically independent streams, because each
  label keys a separate counter-based Philox generator.

This keeps experiments reproducible even when code paths consume random
numbers conditionally (e.g. dropout only in training mode).
"""

import hashlib

import numpy as np

from .errors import ConfigError


class Rng:
    """Fan a single integer seed out into independent named streams."""

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an int, got {type(seed).__name__}")
        self.seed = int(seed)

    def stream(self, label: str) -> np.random.Generator:
        """Return a fresh generator for (seed, label).

        Calling this twice with the same label returns two generators that
        produce identical sequences from the start.
        """
        digest = hashlib.blake2b(
            f"{self.seed}:{label}".encode(), digest_size=16
        ).digest()
        key = int.from_bytes(digest, "little")
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, label: str) -> "Rng":
        """Derive a new Rng whose streams are independent of this one's."""
        digest = hashlib.blake2b(
            f"{self.seed}:{label}".encode(), digest_size=8
        ).digest()
        return Rng(int.from_bytes(digest, "little"))

    def __repr__(self):
        return f"Rng(seed={self.seed})"
