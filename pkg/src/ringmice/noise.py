"""Counter-based uniform draws keyed by (seed, iteration, attribute, row).

Every row's pair of uniforms is a pure function of its key, so the draws do
not depend on processing order, strategy or thread count. The generator is
SplitMix64 evaluated at an explicit counter: ``mix(key + counter * GAMMA)``.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO53 = 1.0 / float(1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, iteration: int, attr: int) -> np.uint64:
    with np.errstate(over="ignore"):
        k = np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        for part in (iteration, attr):
            k = _mix(k + GAMMA) ^ np.uint64(part & 0xFFFFFFFFFFFFFFFF)
        return _mix(k)[0]


def _to_unit(h: np.ndarray) -> np.ndarray:
    # (0, 1) open interval: safe for log
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO53


def noise_stream(seed: int, iteration: int, attr: int, rows) -> tuple[np.ndarray, np.ndarray]:
    """Uniform pairs ``(U1, U2)`` for each row id in ``rows``."""
    r = np.asarray(rows, dtype=np.uint64)
    key = stream_key(seed, iteration, attr)
    with np.errstate(over="ignore"):
        c = r * np.uint64(2)
        h1 = _mix(key + (c + np.uint64(1)) * GAMMA)
        h2 = _mix(key + (c + np.uint64(2)) * GAMMA)
    return _to_unit(h1), _to_unit(h2)
