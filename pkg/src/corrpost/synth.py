"""Synthetic ground truth: independent users walking the Markov chain, and the count query."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_model import (
    CountStream,
    DimensionMismatch,
    LocationDistribution,
    StreamKind,
    TransitionMatrix,
    ValidationError,
)
from .mechanism import STREAM_GENERATE, make_rng


class IndexOutOfRange(ValidationError):
    pass


@dataclass(frozen=True)
class Trajectories:
    """n x T matrix of location indices (user, timestep)."""

    locations: np.ndarray
    m: int

    def __post_init__(self):
        loc = np.asarray(self.locations)
        if loc.ndim != 2 or loc.size == 0:
            raise DimensionMismatch(f"trajectories must be a non-empty n x T matrix, got shape {loc.shape}")
        if np.any(loc != np.round(loc)):
            raise ValidationError("location indices must be integers")
        loc = loc.astype(np.int64)
        if loc.min() < 0 or loc.max() >= self.m:
            raise IndexOutOfRange(f"location indices must lie in [0, {self.m}), got [{loc.min()}, {loc.max()}]")
        loc.setflags(write=False)
        object.__setattr__(self, "locations", loc)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def T(self) -> int:
        return self.locations.shape[1]

    def to_dict(self) -> dict:
        return {"n": self.n, "T": self.T, "m": self.m, "locations": self.locations.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectories":
        tr = cls(np.asarray(d["locations"]), int(d["m"]))
        for key in ("n", "T"):
            if key in d and int(d[key]) != getattr(tr, key):
                raise DimensionMismatch(f"declared {key}={d[key]} but locations have {getattr(tr, key)}")
        return tr


def _categorical(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse of the cumulative row; the clip guards rows summing to 1 - ulp
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def generate_trajectories(
    tm: TransitionMatrix,
    n: int,
    T: int,
    initial: LocationDistribution | None = None,
    seed: int = 0,
) -> Trajectories:
    if n < 1 or T < 1:
        raise ValidationError(f"need n >= 1 and T >= 1, got n={n}, T={T}")
    initial = initial or LocationDistribution.uniform(tm.m)
    if initial.m != tm.m:
        raise DimensionMismatch(f"initial distribution has m={initial.m}, transition matrix has m={tm.m}")
    rng = make_rng(seed, STREAM_GENERATE)
    cum_rows = np.cumsum(tm.rows, axis=1)
    loc = np.empty((n, T), dtype=np.int64)
    loc[:, 0] = _categorical(np.broadcast_to(np.cumsum(initial.probs), (n, tm.m)), rng.random(n))
    for t in range(1, T):
        loc[:, t] = _categorical(cum_rows[loc[:, t - 1]], rng.random(n))
    return Trajectories(loc, tm.m)


def count_query(trajectories, m: int | None = None) -> CountStream:
    """values[t, l] = number of users at location l at time t."""
    if isinstance(trajectories, Trajectories):
        m = trajectories.m if m is None else m
        loc = trajectories.locations
    else:
        loc = np.asarray(trajectories, dtype=np.int64)
        if m is None:
            raise ValidationError("m is required for raw trajectory arrays")
    if loc.ndim != 2:
        raise DimensionMismatch(f"trajectories must be n x T, got shape {loc.shape}")
    if loc.size and (loc.min() < 0 or loc.max() >= m):
        raise IndexOutOfRange(f"location index outside [0, {m})")
    n, T = loc.shape
    counts = np.zeros((T, m), dtype=np.int64)
    for t in range(T):
        counts[t] = np.bincount(loc[:, t], minlength=m)
    return CountStream(counts, StreamKind.TRUE, n)
