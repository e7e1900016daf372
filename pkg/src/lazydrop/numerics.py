"""Deterministic random streams and numerically stable logistic-loss scalars.

Everything downstream (init, masks, data, Monte Carlo) draws from a
counter-based Philox generator keyed by (seed, stream_id), so identical keys
reproduce identical sequences regardless of thread count or call site.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

LN2 = math.log(2.0)

# Fixed stream ids, one per consumer.
STREAM_INIT = 0
STREAM_MASKS = 1
STREAM_DATA = 2
STREAM_MC = 3
STREAM_EVAL_MASKS = 4

_U64 = 2**64


class RngStream:
    """A deterministic random stream identified by (seed, stream_id).

    Streams with distinct ids are statistically independent; a stream is
    single-owner (draws advance its state), but separate streams may be
    consumed concurrently.
    """

    def __init__(self, seed: int, stream_id: int):
        if not (-_U64 < int(seed) < _U64 and -_U64 < int(stream_id) < _U64):
            raise ValueError("seed and stream_id must fit in 64 bits")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(entropy=(self.seed % _U64, self.stream_id % _U64))
        self.gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def _check_finite(z) -> None:
    if not np.all(np.isfinite(z)):
        raise ValueError("logistic functions require finite input")


def logistic_loss(z):
    """log(1 + exp(-z)), evaluated without overflow for any finite z.

    Accepts scalars or arrays; always positive and strictly decreasing.
    """
    _check_finite(z)
    return np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


def logistic_neg_deriv(z):
    """Negative derivative of the logistic loss: 1 / (1 + exp(z)) in (0, 1)."""
    _check_finite(z)
    return expit(-np.asarray(z, dtype=np.float64))


def sample_gaussian_vector(rng: RngStream, d: int) -> np.ndarray:
    """d i.i.d. standard normal entries, deterministic per stream."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    return rng.gen.standard_normal(d)
