"""Named, counter-based random streams.

Every consumer of randomness asks for ``stream(seed, label, index)``; the
Philox generator is keyed by the triple, so streams never depend on call order
or on how jobs are spread over processes.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    key = zlib.crc32(label.encode("ascii"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key, int(index)])))


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, np.ndarray):
        return {"__array__": v.dtype.str, "data": v.tolist()}
    return v


def _restore(v):
    if isinstance(v, dict):
        if "__array__" in v:
            return np.array(v["data"], dtype=np.dtype(v["__array__"]))
        return {k: _restore(x) for k, x in v.items()}
    return v


def generator_state(rng: np.random.Generator) -> dict:
    """Bit-generator state as JSON-serializable plain data."""
    return _plain(rng.bit_generator.state)


def set_generator_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = _restore(state)
