"""Negative log-posterior of an estimated count stream.

Per timestep the objective is

    (1/lambda) * ||noisy_t - r||_1  -  ln Pr(R^t = r)

where the second part is the multinomial log-pmf of ``n`` independent users
whose location distribution at time ``t`` is ``probs[t]``, extended to real
``r`` through a log-factorial.  ``exact_log_gamma`` uses ln Gamma(r + 1);
``stirling`` uses ln(2 pi x)/2 + x ln(x/e), which diverges to -inf as
``x -> 0`` and is therefore evaluated at ``max(x, floor)``.

Cells whose probability is exactly zero are pinned (``pin_zeros``): any mass
on them makes the objective ``+inf``, which is what ln 0 = -inf implies.
With pinning off they are charged ``-ln(floor)`` per unit instead.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .core_model import CorrPostError, CountStream, DimensionMismatch, StreamKind, ValidationError

DEFAULT_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


class LogFactorialMode(str, enum.Enum):
    STIRLING = "stirling"
    EXACT = "exact_log_gamma"


class NonInteriorPoint(CorrPostError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    lam: float
    probs: np.ndarray  # T x m, row t is the location distribution at t
    noisy: np.ndarray  # T x m
    n: int
    stirling_mode: LogFactorialMode = LogFactorialMode.EXACT
    floor: float = DEFAULT_FLOOR
    pin_zeros: bool = True

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        noisy = self.noisy.values if isinstance(self.noisy, CountStream) else self.noisy
        noisy = np.array(noisy, dtype=float)
        if probs.ndim == 1:
            probs = probs[None, :]
        if noisy.ndim == 1:
            noisy = noisy[None, :]
        if probs.shape != noisy.shape:
            raise DimensionMismatch(f"probs have shape {probs.shape} but noisy counts have shape {noisy.shape}")
        if not self.lam > 0:
            raise ValidationError(f"lambda must be positive, got {self.lam!r}")
        if not self.floor > 0:
            raise ValidationError(f"floor must be positive, got {self.floor!r}")
        if int(self.n) < 1:
            raise ValidationError(f"population n must be >= 1, got {self.n}")
        probs.setflags(write=False)
        noisy.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "noisy", noisy)
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "stirling_mode", LogFactorialMode(self.stirling_mode))

    @property
    def T(self) -> int:
        return self.probs.shape[0]

    @property
    def m(self) -> int:
        return self.probs.shape[1]

    @property
    def log_probs(self) -> np.ndarray:
        return np.log(np.maximum(self.probs, self.floor))

    @property
    def pinned(self) -> np.ndarray:
        if self.pin_zeros:
            return self.probs <= 0.0
        return np.zeros(self.probs.shape, dtype=bool)

    def step(self, t: int) -> "ObjectiveSpec":
        """Single-timestep slice, with all settings carried over."""
        return ObjectiveSpec(
            self.lam, self.probs[t : t + 1], self.noisy[t : t + 1], self.n,
            self.stirling_mode, self.floor, self.pin_zeros,
        )


def fidelity_term(estimate_t, noisy_t, lam: float) -> float:
    estimate_t = np.asarray(estimate_t, dtype=float)
    noisy_t = np.asarray(noisy_t, dtype=float)
    if estimate_t.shape != noisy_t.shape:
        raise DimensionMismatch(f"estimate has shape {estimate_t.shape}, noisy has {noisy_t.shape}")
    return float(np.abs(noisy_t - estimate_t).sum() / lam)


def log_factorial(x, mode=LogFactorialMode.EXACT, floor: float = DEFAULT_FLOOR):
    x = np.asarray(x, dtype=float)
    if LogFactorialMode(mode) is LogFactorialMode.EXACT:
        out = gammaln(x + 1.0)
    else:
        xf = np.maximum(x, floor)
        out = 0.5 * (_LOG_2PI + np.log(xf)) + xf * (np.log(xf) - 1.0)
    return float(out) if out.ndim == 0 else out


def log_factorial_derivative(x, mode=LogFactorialMode.EXACT, floor: float = DEFAULT_FLOOR):
    x = np.asarray(x, dtype=float)
    if LogFactorialMode(mode) is LogFactorialMode.EXACT:
        return digamma(x + 1.0)
    xf = np.maximum(x, floor)
    # constant below the floor, matching log_factorial
    return np.where(x >= floor, 0.5 / xf + np.log(xf), 0.0)


def prior_term(estimate_t, probs_t, n: int, mode=LogFactorialMode.EXACT, floor: float = DEFAULT_FLOOR) -> float:
    """-ln of the multinomial probability of ``estimate_t`` (real-extended)."""
    r = np.asarray(estimate_t, dtype=float)
    p = probs_t.probs if hasattr(probs_t, "probs") else np.asarray(probs_t, dtype=float)
    if r.shape != p.shape:
        raise DimensionMismatch(f"estimate has shape {r.shape}, probabilities have {p.shape}")
    log_p = np.log(np.maximum(p, floor))
    log_pmf = gammaln(n + 1.0) + np.sum(r * log_p - log_factorial(r, mode, floor))
    return float(-log_pmf)


def batch_step_objective(R: np.ndarray, spec: ObjectiveSpec, rows=None) -> np.ndarray:
    """Per-timestep objective for a stack of candidates.

    ``R`` has shape (..., T, m) aligned with the ObjectiveSpec's timesteps (or with
    ``rows`` when given, a subset of timestep indices).
    """
    sel = slice(None) if rows is None else rows
    noisy = spec.noisy[sel]
    log_p = spec.log_probs[sel]
    fid = np.abs(noisy - R).sum(axis=-1) / spec.lam
    prior = -(gammaln(spec.n + 1.0) + np.sum(R * log_p - log_factorial(R, spec.stirling_mode, spec.floor), axis=-1))
    out = fid + prior
    if spec.pin_zeros:
        bad = np.any((R > 0) & spec.pinned[sel], axis=-1)
        out = np.where(bad, np.inf, out)
    return out


def step_objective(estimate_t, spec: ObjectiveSpec, t: int) -> float:
    r = np.asarray(estimate_t, dtype=float)
    if r.shape != (spec.m,):
        raise DimensionMismatch(f"estimate row has shape {r.shape}, expected ({spec.m},)")
    return float(batch_step_objective(r[None, :], spec, rows=[t])[0])


def objective(estimate, spec: ObjectiveSpec) -> float:
    values = estimate.values if isinstance(estimate, CountStream) else np.asarray(estimate, dtype=float)
    if values.shape != spec.probs.shape:
        raise DimensionMismatch(f"estimate has shape {values.shape}, spec expects {spec.probs.shape}")
    return float(batch_step_objective(values.astype(float), spec).sum())


def batch_subgradient(R: np.ndarray, spec: ObjectiveSpec, rows=None) -> np.ndarray:
    sel = slice(None) if rows is None else rows
    # sign(0) = 0: the L1 part contributes nothing at a tie
    fid = -np.sign(spec.noisy[sel] - R) / spec.lam
    return fid - spec.log_probs[sel] + log_factorial_derivative(R, spec.stirling_mode, spec.floor)


def subgradient(estimate_t, spec: ObjectiveSpec, t: int) -> np.ndarray:
    r = np.asarray(estimate_t, dtype=float)
    if r.shape != (spec.m,):
        raise DimensionMismatch(f"estimate row has shape {r.shape}, expected ({spec.m},)")
    if np.any(r <= spec.floor):
        raise NonInteriorPoint(f"subgradient needs every entry > {spec.floor}, got min {r.min()!r}")
    return batch_subgradient(r[None, :], spec, rows=[t])[0]


def stream_to_spec(noisy: CountStream, probs: np.ndarray, lam: float, n: int, **kwargs) -> ObjectiveSpec:
    if noisy.kind is not StreamKind.NOISY:
        raise ValidationError(f"expected a noisy stream, got kind={noisy.kind.value}")
    return ObjectiveSpec(lam, probs, noisy.values, n, **kwargs)
