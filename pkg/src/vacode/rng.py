"""Portable counter-based pseudo-random numbers.

All stochastic behaviour in the engine (random crop/erase geometry,
diffusion noise, token sampling) flows through this module so that a
64-bit seed fully determines every output, bit-for-bit, across
platforms.  The generator is a counter-based splitmix64: output i for
seed s is splitmix64_mix(s + (i + 1) * GOLDEN), which allows random
access and trivial vectorisation.

The mapping from raw 64-bit words to floats is part of the external
contract:

* uniform in [0, 1):  (word >> 11) * 2**-53
* gaussian: Box-Muller on consecutive word pairs, with
  u1 = ((word >> 11) + 1) * 2**-53 in (0, 1] and
  z = sqrt(-2 ln u1) * cos/sin(2 pi u2).
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64_scalar(x: int) -> int:
    x &= _MASK
    x = (x ^ (x >> 30)) * _MIX1 & _MASK
    x = (x ^ (x >> 27)) * _MIX2 & _MASK
    return x ^ (x >> 31)


def mix(seed: int, *parts: int | str) -> int:
    """Derive a sub-seed from ``seed`` and a sequence of labels.

    Strings are folded byte-by-byte; the result is stable across runs
    and independent of Python's hash randomisation.
    """
    h = seed & _MASK
    for part in parts:
        if isinstance(part, str):
            for b in part.encode("utf-8"):
                h = _mix64_scalar(h + _GOLDEN + b)
        else:
            h = _mix64_scalar(h + _GOLDEN + (part & _MASK))
    return _mix64_scalar(h + _GOLDEN)


def raw_words(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Return the n raw uint64 outputs starting at counter ``offset``."""
    counters = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    state = np.uint64(seed & _MASK) + counters * np.uint64(_GOLDEN)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def uniforms(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """n doubles uniform in [0, 1)."""
    return (raw_words(seed, n, offset) >> np.uint64(11)) * 2.0**-53


def gaussians(seed: int, n: int) -> np.ndarray:
    """n standard-normal doubles via Box-Muller on word pairs."""
    m = (n + 1) // 2
    words = raw_words(seed, 2 * m)
    u1 = ((words[0::2] >> np.uint64(11)) + np.uint64(1)) * 2.0**-53
    u2 = (words[1::2] >> np.uint64(11)) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]
