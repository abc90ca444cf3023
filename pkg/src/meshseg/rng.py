"""Seeded random streams.

Uniform bits come from numpy's Philox-4x64 counter-based generator; normal
deviates are produced from those uniforms with the basic Box-Muller
transform so the corner streams are specified end to end.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed, stream=0):
    """Philox generator keyed by ``seed``; ``stream`` selects an independent substream."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]))


def box_muller(u1, u2):
    """Map two U(0, 1] arrays to two independent standard normal arrays."""
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return r * np.cos(theta), r * np.sin(theta)


def standard_normal(rng, n):
    """``n`` N(0, 1) deviates via Box-Muller.

    Uniforms are consumed in consecutive pairs and each pair yields two
    consecutive deviates, so the first ``n`` deviates of a stream do not
    depend on how many are requested.
    """
    half = (n + 1) // 2
    u = rng.random((half, 2))
    # random() is in [0, 1); flip to (0, 1] so log() stays finite
    z1, z2 = box_muller(1.0 - u[:, 0], u[:, 1])
    out = np.empty(2 * half)
    out[0::2], out[1::2] = z1, z2
    return out[:n]
