"""Laplace mechanism over count streams, with seedable randomness.

Randomness always comes from a ``numpy.random.Generator`` (PCG64, period
2**128).  Independent sub-streams of one 64-bit seed are obtained through
``SeedSequence`` spawn keys, so the generation, release and solver stages of a
single experiment cell never share a generator state.
"""

from __future__ import annotations

import numpy as np

from .core_model import CountStream, PrivacyParams, StreamKind, ValidationError

MAX_SEED = 2**64 - 1

# spawn keys for the stages of one experiment cell
STREAM_GENERATE = 0
STREAM_RELEASE = 1
STREAM_SOLVER = 2


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if stream is None:
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def laplace_scale(params: PrivacyParams) -> float:
    return params.lambda_


def laplace_inverse_cdf(u, lam: float):
    """Map u in (-1/2, 1/2) to a Laplace(0, lam) variate."""
    u = np.asarray(u, dtype=float)
    return -lam * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def sample_laplace(lam: float, rng: np.random.Generator, size=None):
    if not lam > 0:
        raise ValidationError(f"Laplace scale must be positive, got {lam!r}")
    u = rng.random(size) - 0.5
    # rng.random is [0, 1): the single value u == -0.5 would map to -inf
    u = np.where(u == -0.5, np.nextafter(-0.5, 0.0), u)
    x = laplace_inverse_cdf(u, lam)
    return float(x) if size is None else x


def release_stream(true_counts: CountStream, params: PrivacyParams, seed: int) -> CountStream:
    """Perturb every cell with independent Laplace noise; one budget spend per timestep."""
    if true_counts.kind is not StreamKind.TRUE:
        raise ValidationError(f"release expects a true count stream, got kind={true_counts.kind.value}")
    rng = make_rng(seed, STREAM_RELEASE)
    noise = sample_laplace(laplace_scale(params), rng, size=true_counts.values.shape)
    return CountStream(true_counts.values + noise, StreamKind.NOISY, true_counts.n)
