"""MAP post-processing, the correlation-agnostic baseline, and an exhaustive oracle.

The program decouples across timesteps once the per-step location
distributions are fixed, so ``solve_map`` treats every timestep as an
independent problem over the scaled simplex {r >= 0, sum(r) = n}.  All
timesteps and restarts are advanced together as one batch; a row that meets
the stopping rule is frozen and never touched again, which keeps each row's
trajectory identical to what a single-step solve would produce.
"""

from __future__ import annotations

import enum
import math
import time
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, polygamma

from .core_model import CountStream, InstanceTooLarge, StreamKind, ValidationError
from .posterior import LogFactorialMode, ObjectiveSpec, batch_step_objective, batch_subgradient

ORACLE_LIMIT = 1_000_000
ROUNDING_SLACK = 1e-6


class RoundMode(str, enum.Enum):
    NONE = "none"
    LARGEST_REMAINDER = "largest_remainder"


class SolverMethod(str, enum.Enum):
    AUTO = "auto"
    SUBGRADIENT = "subgradient"
    DUAL_BISECTION = "dual_bisection"


class NonConvergence(UserWarning):
    """Iteration budget exhausted before the stopping rule fired."""


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 5000
    step_c: float = 1.0
    tol: float = 1e-8
    restarts: int = 3
    round_mode: RoundMode = RoundMode.NONE
    seed: int = 0
    # auto: dual_bisection for exact_log_gamma (convex), subgradient for stirling
    method: SolverMethod = SolverMethod.AUTO
    # stopping rule compares the running best against its value this many iterations ago
    window: int = 50
    record_trace: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ValidationError(f"tol must be > 0, got {self.tol}")
        if self.restarts < 1:
            raise ValidationError(f"restarts must be >= 1, got {self.restarts}")
        if not self.step_c > 0:
            raise ValidationError(f"step_c must be > 0, got {self.step_c}")
        if self.window < 1:
            raise ValidationError(f"window must be >= 1, got {self.window}")
        object.__setattr__(self, "round_mode", RoundMode(self.round_mode))
        object.__setattr__(self, "method", SolverMethod(self.method))


@dataclass
class SolveReport:
    objectives: np.ndarray
    iterations: np.ndarray
    residuals: np.ndarray
    min_entries: np.ndarray
    converged: np.ndarray
    rounded: np.ndarray
    wall_time: float
    # (iterations, restarts, T) running-best objective, only with record_trace
    best_trace: np.ndarray | None = field(default=None, repr=False)

    @property
    def total_objective(self) -> float:
        return float(self.objectives.sum())

    @property
    def nonconvergence(self) -> bool:
        return not bool(self.converged.all())


def project_simplex(v, n: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto {r >= 0, sum(r) = n} (sort and threshold)."""
    if not n > 0:
        raise ValidationError(f"simplex total must be positive, got {n}")
    v = np.asarray(v, dtype=float)
    return project_rows(v[None, :], n)[0]


def project_rows(V: np.ndarray, n: float, pinned: np.ndarray | None = None) -> np.ndarray:
    """Row-wise simplex projection over the last axis; pinned cells are forced to 0."""
    V = np.asarray(V, dtype=float)
    if pinned is not None and pinned.any():
        free_min = np.min(np.where(pinned, np.inf, V), axis=-1, keepdims=True)
        V = np.where(pinned, free_min - n - 1.0, V)
    m = V.shape[-1]
    U = -np.sort(-V, axis=-1)
    css = np.cumsum(U, axis=-1) - n
    k = np.arange(1, m + 1)
    cond = U - css / k > 0
    # largest index satisfying cond; cond[..., 0] always holds
    rho = m - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(V - theta, 0.0)


def round_largest_remainder(x, n: int) -> np.ndarray:
    """Integer vector with sum ``n`` closest to ``x`` by largest remainders (ties: lower index)."""
    x = np.asarray(x, dtype=float)
    base = np.floor(x).astype(np.int64)
    base = np.maximum(base, 0)
    short = int(n - base.sum())
    if short > 0:
        order = np.argsort(-(x - np.floor(x)), kind="stable")
        base[order[:short]] += 1
    elif short < 0:
        # only reachable when x does not already sum to n; strip from the largest cells
        for _ in range(-short):
            base[int(np.argmax(base))] -= 1
    return base


def _exchange_polish(r: np.ndarray, spec: ObjectiveSpec, t: int) -> np.ndarray:
    """Move single units between cells while that lowers the step objective.

    For the exact-mode objective (separable, convex in every cell) a point
    with no improving unit exchange is a global integer optimum.
    """
    m = r.size
    pairs = [(a, b) for a in range(m) for b in range(m) if a != b]
    cur = float(batch_step_objective(r[None, :].astype(float), spec, rows=[t])[0])
    for _ in range(int(spec.n) * m + 1):
        cands = []
        for a, b in pairs:
            if r[a] > 0:
                c = r.copy()
                c[a] -= 1
                c[b] += 1
                cands.append(c)
        if not cands:
            break
        C = np.stack(cands)
        vals = batch_step_objective(C.astype(float), spec, rows=[t] * len(C))
        i = int(np.argmin(vals))
        if not vals[i] < cur:
            break
        r, cur = C[i], float(vals[i])
    return r


def _restart_starts(spec: ObjectiveSpec, config: SolverConfig, free: np.ndarray) -> np.ndarray:
    """Starting points, shape (restarts, T, m).

    Restart 0 projects the noisy counts.  Random restarts are seeded from the
    solver seed and the bytes of the timestep's own data, so a timestep gets
    the same starts whether it is solved alone or inside a longer stream.
    """
    T, m = spec.probs.shape
    X0 = np.empty((config.restarts, T, m))
    X0[0] = project_rows(spec.noisy, spec.n, ~free)
    for t in range(T):
        if config.restarts == 1:
            break
        key = zlib.crc32(spec.noisy[t].tobytes() + spec.probs[t].tobytes())
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), key]))
        w = rng.dirichlet(np.ones(m), size=config.restarts - 1)
        w = np.where(free[t], w, 0.0)
        w = w / w.sum(axis=-1, keepdims=True)
        X0[1:, t] = w * spec.n
    return X0


def _subgradient_batch(spec: ObjectiveSpec, config: SolverConfig):
    T, m = spec.probs.shape
    K = config.restarts
    pinned = spec.pinned
    free = ~pinned
    # a row with every cell pinned cannot happen (probs sum to 1), so free.any(-1) holds
    X = _restart_starts(spec, config, free)
    rows = np.broadcast_to(np.arange(T), (K, T))
    pin_b = np.broadcast_to(pinned, (K, T, m))

    best_x = X.copy()
    best_f = batch_step_objective(X, spec)
    window_f = best_f.copy()
    iters = np.zeros((K, T), dtype=np.int64)
    done = np.zeros((K, T), dtype=bool)
    trace = [] if config.record_trace else None

    for k in range(1, config.max_iters + 1):
        act = ~done
        if not act.any():
            break
        idx = np.nonzero(act)
        r_rows = rows[idx]
        Xa = X[idx]
        G = batch_subgradient(Xa, spec, rows=r_rows)
        Xa = project_rows(Xa - (config.step_c / math.sqrt(k)) * G, spec.n, pin_b[idx])
        fa = batch_step_objective(Xa, spec, rows=r_rows)
        X[idx] = Xa
        better = fa < best_f[idx]
        if better.any():
            bi = tuple(a[better] for a in idx)
            best_f[bi] = fa[better]
            best_x[bi] = Xa[better]
        iters[idx] = k
        if trace is not None:
            trace.append(best_f.copy())
        if k % config.window == 0:
            scale = np.maximum(1.0, np.abs(best_f))
            stalled = (window_f - best_f) <= config.tol * scale
            done |= act & stalled
            window_f = best_f.copy()

    converged = done.copy()
    return best_x, best_f, iters, converged, (np.stack(trace) if trace else None)


def inverse_digamma(y) -> np.ndarray:
    """x > 0 with digamma(x) = y (Newton from Minka's starting point)."""
    y = np.asarray(y, dtype=float)
    # past y ~ 700 the root exceeds any count we solve for; cap it instead of overflowing
    y = np.minimum(y, 700.0)
    with np.errstate(divide="ignore"):
        x = np.where(y >= -2.22, np.exp(y) + 0.5, -1.0 / (y - digamma(1.0)))
    for _ in range(6):
        x = x - (digamma(x) - y) / polygamma(1, x)
        x = np.maximum(x, 1e-300)
    return x


def _dual_cells(mu, y, log_p, inv_lam, free):
    """Cell-wise minimizer of |y - r|/lam - r log_p + lnGamma(r + 1) - mu r over r >= 0."""
    below = inverse_digamma(mu + log_p + inv_lam) - 1.0  # stationary point left of the kink at y
    above = inverse_digamma(mu + log_p - inv_lam) - 1.0  # stationary point right of it
    r = np.where(below < y, np.maximum(below, 0.0), np.where(above > y, above, y))
    r = np.where(y <= 0, np.maximum(above, 0.0), r)
    return np.where(free, r, 0.0)


def _dual_bisection(spec: ObjectiveSpec, config: SolverConfig):
    """Exact solve for the exact-mode objective, which is strictly convex per cell.

    Each cell's minimizer of the Lagrangian is nondecreasing in the multiplier
    ``mu`` of the sum constraint, so bisection on ``mu`` finds the point where
    the cells add up to ``n``.
    """
    T, m = spec.probs.shape
    n = spec.n
    y = spec.noisy
    log_p = spec.log_probs
    free = ~spec.pinned
    inv_lam = 1.0 / spec.lam
    big = np.where(free, log_p, np.nan)
    lo = np.full((T, 1), digamma(1.0) - inv_lam - 1.0) - np.nanmax(big, axis=1, keepdims=True)
    hi = np.full((T, 1), digamma(n + 1.0) + inv_lam + 1.0) - np.nanmin(big, axis=1, keepdims=True)
    iters = np.zeros(T, dtype=np.int64)
    for k in range(1, 201):
        mid = 0.5 * (lo + hi)
        s = _dual_cells(mid, y, log_p, inv_lam, free).sum(axis=1, keepdims=True)
        low = s < n
        lo = np.where(low, mid, lo)
        hi = np.where(low, hi, mid)
        open_ = (hi - lo)[:, 0] > 1e-13 * np.maximum(1.0, np.abs(mid[:, 0]))
        iters[open_] = k
        if not open_.any():
            break
    X = _dual_cells(0.5 * (lo + hi), y, log_p, inv_lam, free)
    # absorb the last few ulps of sum error without leaving the simplex
    X = project_rows(X, n, spec.pinned)
    f = batch_step_objective(X, spec)
    return X, f, iters, np.ones(T, dtype=bool)


def solve_map(spec: ObjectiveSpec, config: SolverConfig | None = None):
    """MAP estimate of the whole stream; returns ``(CountStream[estimate], SolveReport)``.

    With ``round_mode=largest_remainder`` every timestep is rounded to an
    integer vector (largest remainder, then improving unit exchanges) and the
    rounding is kept only when it costs at most 1e-6 of objective.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    method = config.method
    if method is SolverMethod.AUTO:
        exact = spec.stirling_mode is LogFactorialMode.EXACT
        method = SolverMethod.DUAL_BISECTION if exact else SolverMethod.SUBGRADIENT
    if method is SolverMethod.DUAL_BISECTION:
        if spec.stirling_mode is not LogFactorialMode.EXACT:
            raise ValidationError("dual_bisection needs the convex exact_log_gamma objective")
        est, obj, iterations, conv = _dual_bisection(spec, config)
        trace = None
    else:
        best_x, best_f, iters, converged, trace = _subgradient_batch(spec, config)
        # best restart per timestep; argmin keeps the lowest restart index on ties
        pick = np.argmin(best_f, axis=0)
        cols = np.arange(spec.T)
        est = best_x[pick, cols].copy()
        obj = best_f[pick, cols].copy()
        conv = converged.all(axis=0)
        iterations = iters.max(axis=0)
    rounded = np.zeros(spec.T, dtype=bool)

    if config.round_mode is RoundMode.LARGEST_REMAINDER:
        for t in range(spec.T):
            r = round_largest_remainder(est[t], spec.n)
            r = _exchange_polish(r, spec, t)
            f = float(batch_step_objective(r[None, :].astype(float), spec, rows=[t])[0])
            if f <= obj[t] + ROUNDING_SLACK:
                est[t] = r
                obj[t] = f
                rounded[t] = True

    report = SolveReport(
        objectives=obj,
        iterations=iterations,
        residuals=np.abs(est.sum(axis=1) - spec.n),
        min_entries=est.min(axis=1),
        converged=conv,
        rounded=rounded,
        wall_time=time.perf_counter() - t0,
        best_trace=trace,
    )
    if report.nonconvergence:
        warnings.warn(
            f"{int((~conv).sum())} of {spec.T} timesteps hit max_iters={config.max_iters} "
            f"before the best objective stalled (tol={config.tol})",
            NonConvergence,
            stacklevel=2,
        )
    return CountStream(est, StreamKind.ESTIMATE, spec.n), report


def solve_baseline_mle(noisy, lam: float, n: int) -> CountStream:
    """Correlation-agnostic L1 fit: argmin ||noisy_t - r||_1 over the simplex, per timestep.

    The L1 minimizer is rarely unique.  The Euclidean projection of the noisy
    row always lies in the minimizing set (every coordinate moves toward the
    constraint in the same direction, or up to 0), so it is returned: it is
    the minimizer closest to the noisy counts in L2.  ``lam`` scales the
    objective but cannot move its minimizers.
    """
    if not lam > 0:
        raise ValidationError(f"lambda must be positive, got {lam!r}")
    values = noisy.values if isinstance(noisy, CountStream) else np.asarray(noisy, dtype=float)
    return CountStream(project_rows(values, n), StreamKind.ESTIMATE, n)


def compositions(n: int, m: int) -> np.ndarray:
    """All nonnegative integer m-vectors summing to n, in lexicographic order."""
    if m == 1:
        return np.array([[n]], dtype=np.int64)
    parts = []
    for first in range(n + 1):
        rest = compositions(n - first, m - 1)
        parts.append(np.column_stack([np.full(len(rest), first, dtype=np.int64), rest]))
    return np.concatenate(parts)


def brute_force_oracle(spec: ObjectiveSpec, t: int):
    """Exhaustive integer minimizer of the step-``t`` objective; ties go to the lexicographically smallest."""
    count = math.comb(spec.n + spec.m - 1, spec.m - 1)
    if count > ORACLE_LIMIT:
        raise InstanceTooLarge(f"{count} compositions of n={spec.n} into m={spec.m} parts exceeds {ORACLE_LIMIT}")
    C = compositions(spec.n, spec.m)
    vals = batch_step_objective(C.astype(float), spec, rows=np.full(len(C), t))
    i = int(np.argmin(vals))
    return C[i], float(vals[i])
