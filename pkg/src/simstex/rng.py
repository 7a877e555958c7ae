"""Deterministic, splittable random streams.

Every stochastic draw in the sampler comes from a child stream keyed by
(purpose, step, view).  Child streams are mutually independent, so e.g. the
per-step DDIM noise does not shift when background-fill draws are added or
removed.  This is what makes the single-view sampler bit-comparable to a
plain DDIM loop driven from the same root seed.

Children are counter-based (Philox keyed by the packed coordinates), so
constructing one is cheap enough for the per-view inner loop.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox

# stable small integers naming each draw site
STREAM_INIT = 0
STREAM_SHARED = 1
STREAM_BACKGROUND = 2
STREAM_STEP = 3
STREAM_JITTER = 4
STREAM_ENCODE = 5

_MASK64 = (1 << 64) - 1


class RngTree:
    """Root seed plus a namespace; children are derived, never advanced in place."""

    def __init__(self, seed: int, namespace: int = 0):
        self.seed = int(seed) & _MASK64
        self.namespace = int(namespace)

    def child(self, stream: int, *key: int) -> np.random.Generator:
        a = b = 0
        if len(key) > 0:
            a = int(key[0]) + 1
        if len(key) > 1:
            b = int(key[1]) + 1
        if len(key) > 2:
            raise ValueError("at most two key coordinates")
        packed = ((self.namespace & 0xFF) << 56 | (int(stream) & 0xFF) << 48
                  | (a & 0xFFFFFF) << 24 | (b & 0xFFFFFF))
        return Generator(Philox(key=(self.seed << 64) | packed))
