"""Utility metrics: squared error against the truth and plausibility under the Markov model."""

from __future__ import annotations

import math

import numpy as np

from .core_model import (
    CountStream,
    DimensionMismatch,
    InstanceTooLarge,
    ShapeMismatch,
    StreamKind,
    TransitionMatrix,
    ValidationError,
)
from .solver import compositions, round_largest_remainder

PLAUSIBILITY_CUTOFF = 1e-10
FLOW_LIMIT = 1_000_000


class NonIntegerStream(ValidationError):
    pass


def _values(stream) -> np.ndarray:
    return stream.values if isinstance(stream, CountStream) else np.asarray(stream, dtype=float)


def mse(estimate, truth) -> float:
    est, tru = _values(estimate), _values(truth)
    if est.shape != tru.shape:
        raise ShapeMismatch(f"estimate has shape {est.shape} but truth has shape {tru.shape}")
    return float(np.mean((est.astype(float) - tru.astype(float)) ** 2))


def round_stream(stream: CountStream) -> CountStream:
    """Largest-remainder rounding of every row to integers summing to n."""
    if stream.n is None:
        raise ValidationError("rounding needs the population n")
    rows = [round_largest_remainder(r, stream.n) for r in stream.values]
    return CountStream(np.stack(rows), StreamKind.TRUE, stream.n)


def transition_probability(prev_counts, next_counts, tm: TransitionMatrix) -> float:
    """Pr(next counts | previous counts) for independent users on the chain.

    Sums over every flow matrix F (F[i, j] users moving i -> j) whose row sums
    are ``prev_counts`` and column sums ``next_counts``.
    """
    a = np.asarray(prev_counts, dtype=np.int64)
    b = np.asarray(next_counts, dtype=np.int64)
    m = tm.m
    if a.shape != (m,) or b.shape != (m,):
        raise DimensionMismatch(f"count vectors must have length m={m}, got {a.shape} and {b.shape}")
    if a.sum() != b.sum():
        return 0.0
    n_states = math.prod(math.comb(int(ai) + m - 1, m - 1) for ai in a)
    if n_states > FLOW_LIMIT:
        raise InstanceTooLarge(f"{n_states} candidate flow rows exceed the limit {FLOW_LIMIT}")

    P = tm.rows
    per_row = []
    for i in range(m):
        F = compositions(int(a[i]), m)
        with np.errstate(divide="ignore", invalid="ignore"):
            logw = (
                math.lgamma(a[i] + 1)
                - np.sum([[math.lgamma(f + 1) for f in row] for row in F], axis=1)
                + np.sum(np.where(F > 0, F * np.log(P[i]), 0.0), axis=1)
            )
        w = np.exp(logw)
        keep = w > 0
        per_row.append((F[keep], w[keep]))

    def walk(i: int, remaining: np.ndarray) -> float:
        if i == m:
            return 1.0 if not remaining.any() else 0.0
        F, w = per_row[i]
        ok = np.all(F <= remaining, axis=1)
        total = 0.0
        for f, wf in zip(F[ok], w[ok]):
            total += wf * walk(i + 1, remaining - f)
        return total

    return float(walk(0, b.copy()))


def stepwise_plausibility(stream, tm: TransitionMatrix) -> list[float]:
    vals = _values(stream)
    if vals.ndim != 2 or vals.shape[1] != tm.m:
        raise DimensionMismatch(f"stream has shape {vals.shape}, transition matrix has m={tm.m}")
    if np.any(vals != np.round(vals)) or np.any(vals < 0):
        raise NonIntegerStream("plausibility needs nonnegative integer counts; round the stream first")
    ints = np.round(vals).astype(np.int64)
    if np.any(ints.sum(axis=1) != ints[0].sum()):
        raise NonIntegerStream("plausibility needs every row to sum to the same n")
    return [transition_probability(ints[t], ints[t + 1], tm) for t in range(len(ints) - 1)]


def plausibility_violations(plaus, cutoff: float = PLAUSIBILITY_CUTOFF) -> int:
    return int(np.sum(np.asarray(plaus, dtype=float) < cutoff))
