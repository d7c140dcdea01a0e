"""Domain types shared across the package.

All types are frozen dataclasses holding read-only numpy arrays, so they can
be passed between threads and processes without copying defensively.
Serialization goes through plain dicts (``to_dict`` / ``from_dict``) whose
keys mirror the field names; matrices are row-major lists of lists.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

STOCHASTIC_TOL = 1e-9
ESTIMATE_SUM_TOL = 1e-6


class CorrPostError(Exception):
    """Base class for all package errors."""


class ValidationError(CorrPostError, ValueError):
    pass


class RowNotStochastic(ValidationError):
    pass


class NegativeEntry(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class InstanceTooLarge(CorrPostError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class StreamKind(str, enum.Enum):
    TRUE = "true"
    NOISY = "noisy"
    ESTIMATE = "estimate"


class PriorPolicy(str, enum.Enum):
    FREQUENCY = "frequency"
    UNIFORM = "uniform"


class PrivacyMode(str, enum.Enum):
    PLAIN_DP = "plain_dp"
    TEMPORAL_DP = "temporal_dp"


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic matrix; ``rows[i, j] = Pr(next = j | current = i)``."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1] or rows.shape[0] < 1:
            raise DimensionMismatch(f"transition matrix must be square with m >= 1, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValidationError("transition matrix has non-finite entries")
        if np.any(rows < 0):
            i, j = np.argwhere(rows < 0)[0]
            raise NegativeEntry(f"transition matrix entry ({i},{j}) is negative: {rows[i, j]}")
        if np.any(rows > 1):
            i, j = np.argwhere(rows > 1)[0]
            raise ValidationError(f"transition matrix entry ({i},{j}) exceeds 1: {rows[i, j]}")
        sums = rows.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL)
        if bad.size:
            raise RowNotStochastic(f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1")
        object.__setattr__(self, "rows", _frozen(rows))

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    def to_dict(self) -> dict:
        return {"m": self.m, "rows": self.rows.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TransitionMatrix":
        tm = cls(np.asarray(d["rows"], dtype=float))
        if "m" in d and int(d["m"]) != tm.m:
            raise DimensionMismatch(f"declared m={d['m']} but rows are {tm.m}x{tm.m}")
        return tm


def validate_transition_matrix(rows) -> TransitionMatrix:
    return TransitionMatrix(np.asarray(rows, dtype=float))


@dataclass(frozen=True)
class LocationDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise DimensionMismatch(f"distribution must be a non-empty vector, got shape {p.shape}")
        if np.any(p < 0):
            raise NegativeEntry("distribution has negative entries")
        if abs(p.sum() - 1.0) > STOCHASTIC_TOL:
            raise RowNotStochastic(f"distribution sums to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def m(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, m: int) -> "LocationDistribution":
        return cls(np.full(m, 1.0 / m))

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LocationDistribution":
        return cls(np.asarray(d["probs"], dtype=float))


@dataclass(frozen=True)
class CountStream:
    """T x m matrix of per-timestep location counts.

    ``n`` is required for ``true`` and ``estimate`` streams and checked against
    every row sum (exactly for true, within 1e-6 for estimates).
    """

    values: np.ndarray
    kind: StreamKind
    n: int | None = None

    def __post_init__(self):
        kind = StreamKind(self.kind)
        object.__setattr__(self, "kind", kind)
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionMismatch(f"count stream must be a non-empty T x m matrix, got shape {v.shape}")
        if kind is StreamKind.TRUE:
            if not np.all(np.isfinite(v.astype(float))) or np.any(v.astype(float) != np.round(v.astype(float))):
                raise ValidationError("true counts must be integers")
            v = v.astype(np.int64)
            if np.any(v < 0):
                raise NegativeEntry("true counts must be nonnegative")
            sums = v.sum(axis=1)
            n = int(sums[0]) if self.n is None else int(self.n)
            if np.any(sums != n):
                t = int(np.flatnonzero(sums != n)[0])
                raise ValidationError(f"true counts at t={t} sum to {sums[t]}, expected n={n}")
            object.__setattr__(self, "n", n)
            object.__setattr__(self, "values", _frozen(v, dtype=np.int64))
            return
        v = v.astype(float)
        if not np.all(np.isfinite(v)):
            raise ValidationError("count stream has non-finite entries")
        if kind is StreamKind.ESTIMATE:
            if self.n is None:
                raise ValidationError("estimate streams need the population n")
            if np.any(v < 0):
                raise NegativeEntry("estimate counts must be nonnegative")
            resid = np.abs(v.sum(axis=1) - self.n)
            if np.any(resid > ESTIMATE_SUM_TOL):
                t = int(np.argmax(resid))
                raise ValidationError(f"estimate at t={t} sums to {v[t].sum()!r}, expected n={self.n}")
        if self.n is not None:
            object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "values", _frozen(v))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def to_dict(self) -> dict:
        d = {"T": self.T, "m": self.m, "kind": self.kind.value, "values": self.values.tolist()}
        if self.n is not None:
            d["n"] = self.n
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CountStream":
        values = np.asarray(d["values"], dtype=float)
        if values.ndim != 2:
            raise DimensionMismatch("values must be a matrix (list of rows)")
        for key, actual in (("T", values.shape[0]), ("m", values.shape[1])):
            if key in d and int(d[key]) != actual:
                raise DimensionMismatch(f"declared {key}={d[key]} but values have {actual}")
        return cls(values, StreamKind(d["kind"]), d.get("n"))


@dataclass(frozen=True)
class PrivacyParams:
    """Laplace calibration. ``lambda_`` is derived: multiplier * sensitivity / budget.

    In ``plain_dp`` mode the multiplier is forced to 1.
    """

    budget: float
    sensitivity: float = 1.0
    mode: PrivacyMode = PrivacyMode.PLAIN_DP
    scale_multiplier: float = 1.0
    lambda_: float = field(init=False)

    def __post_init__(self):
        mode = PrivacyMode(self.mode)
        object.__setattr__(self, "mode", mode)
        for name in ("budget", "sensitivity", "scale_multiplier"):
            val = float(getattr(self, name))
            if not np.isfinite(val) or val <= 0:
                raise ValidationError(f"{name} must be a positive finite number, got {val!r}")
            object.__setattr__(self, name, val)
        mult = self.scale_multiplier if mode is PrivacyMode.TEMPORAL_DP else 1.0
        object.__setattr__(self, "lambda_", mult * self.sensitivity / self.budget)

    def to_dict(self) -> dict:
        return {
            "sensitivity": self.sensitivity,
            "budget": self.budget,
            "mode": self.mode.value,
            "scale_multiplier": self.scale_multiplier,
            "lambda": self.lambda_,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyParams":
        p = cls(
            budget=d["budget"],
            sensitivity=d.get("sensitivity", 1.0),
            mode=d.get("mode", "plain_dp"),
            scale_multiplier=d.get("scale_multiplier", 1.0),
        )
        if "lambda" in d and abs(float(d["lambda"]) - p.lambda_) > 1e-12 * max(1.0, p.lambda_):
            raise ValidationError(f"declared lambda={d['lambda']} disagrees with derived {p.lambda_}")
        return p


def write_json(obj: Any, path) -> None:
    payload = obj.to_dict() if hasattr(obj, "to_dict") else obj
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
