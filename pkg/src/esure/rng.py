"""Deterministic random streams addressed by a derivation path.

Every random artifact in this package is a pure function of
``(global_seed, purpose tag, indices...)``.  A stream is identified by that
path; two streams built from the same path emit identical sequences, and
streams with different paths are statistically independent.

Generator algorithm: numpy PCG64 seeded through ``SeedSequence``, with
normals drawn by the ziggurat method (``Generator.standard_normal``).  The
algorithm is fixed per release because bit-exact reproducibility is part of
the determinism contract.
"""

from __future__ import annotations

import hashlib

import numpy as np

PathElement = int | str


def _encode_path_element(element: PathElement) -> int:
    if isinstance(element, bool):
        raise TypeError("bool is not a valid stream path element")
    if isinstance(element, int):
        if element < 0:
            raise ValueError(f"stream path integers must be >= 0, got {element}")
        return element
    if isinstance(element, str):
        digest = hashlib.sha256(element.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big")
    raise TypeError(f"stream path elements must be int or str, got {type(element).__name__}")


class RngStream:
    """A deterministic pseudo-random stream keyed by ``(seed, *path)``.

    The path mixes purpose tags (strings) and indices (non-negative ints),
    e.g. ``RngStream(7, "train-noise", image_index, realization)``.  Parallel
    users must derive disjoint children rather than share one stream.
    """

    def __init__(self, seed: int, *path: PathElement):
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
        self.seed = seed
        self.path = tuple(path)
        key = tuple(_encode_path_element(p) for p in path)
        seq = np.random.SeedSequence(entropy=seed, spawn_key=key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *extra: PathElement) -> "RngStream":
        """A fresh stream whose path extends this one; independent of self."""
        return RngStream(self.seed, *self.path, *extra)

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path!r})"
