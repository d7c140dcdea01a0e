"""Markov-chain machinery: priors over a single user's location and their propagation."""

from __future__ import annotations

import numpy as np

from .core_model import (
    DimensionMismatch,
    LocationDistribution,
    PriorPolicy,
    TransitionMatrix,
    ValidationError,
)


def _renormalize(p: np.ndarray) -> np.ndarray:
    # keeps repeated products from drifting off the simplex
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def propagate(prev: LocationDistribution, tm: TransitionMatrix) -> LocationDistribution:
    if prev.m != tm.m:
        raise DimensionMismatch(f"distribution has m={prev.m} but transition matrix has m={tm.m}")
    return LocationDistribution(_renormalize(prev.probs @ tm.rows))


def prior_distribution(policy, noisy_first, n: int) -> LocationDistribution:
    """Distribution of one user's location at the first timestep.

    The frequency policy clamps negative noisy counts to zero before
    normalizing and falls back to uniform when nothing positive is left.
    """
    if n < 1:
        raise ValidationError(f"population n must be >= 1, got {n}")
    noisy_first = np.asarray(noisy_first, dtype=float)
    m = noisy_first.size
    if PriorPolicy(policy) is PriorPolicy.UNIFORM:
        return LocationDistribution.uniform(m)
    clamped = np.clip(noisy_first, 0.0, None)
    total = clamped.sum()
    if total <= 0:
        return LocationDistribution.uniform(m)
    return LocationDistribution(clamped / total)


def propagate_all(prior: LocationDistribution, tm: TransitionMatrix, T: int) -> list[LocationDistribution]:
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    if prior.m != tm.m:
        raise DimensionMismatch(f"prior has m={prior.m} but transition matrix has m={tm.m}")
    out = [prior]
    for _ in range(T - 1):
        out.append(propagate(out[-1], tm))
    return out


def propagate_matrix(prior: LocationDistribution, tm: TransitionMatrix, T: int) -> np.ndarray:
    """``propagate_all`` stacked into a T x m array."""
    return np.stack([d.probs for d in propagate_all(prior, tm, T)])


def smooth_correlations(base: TransitionMatrix, s: float) -> TransitionMatrix:
    """Additive (Laplacian) smoothing of each row toward uniform; larger s = weaker correlation."""
    if not s >= 0:
        raise ValidationError(f"smoothing level must be >= 0, got {s!r}")
    if s == 0:
        return base
    shifted = base.rows + s
    return TransitionMatrix(shifted / shifted.sum(axis=1, keepdims=True))
