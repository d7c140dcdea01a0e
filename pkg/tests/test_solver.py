import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog, minimize

from corrpost.core_model import CountStream, InstanceTooLarge, StreamKind, ValidationError
from corrpost.posterior import LogFactorialMode, ObjectiveSpec, fidelity_term, step_objective
from corrpost.solver import (
    NonConvergence,
    RoundMode,
    SolverConfig,
    SolverMethod,
    brute_force_oracle,
    compositions,
    project_simplex,
    round_largest_remainder,
    solve_baseline_mle,
    solve_map,
)

ROUNDED = SolverConfig(round_mode=RoundMode.LARGEST_REMAINDER)


def _random_spec(rng, m, n, T=1, lam=None, mode=LogFactorialMode.EXACT):
    probs = rng.dirichlet(np.ones(m), size=T)
    lam = lam if lam is not None else 1.0 / rng.choice([0.2, 1.0])
    noisy = rng.multinomial(n, probs[0], size=T) + rng.laplace(0, lam, (T, m))
    return ObjectiveSpec(lam, probs, noisy, n, mode)


# ---- projection --------------------------------------------------------------

@pytest.mark.parametrize(
    "v, n, expected",
    [([1, 0, 0], 1, [1, 0, 0]), ([2, -1], 1, [1, 0]), ([0.6, 0.6, 0.6], 1, [1 / 3] * 3)],
)
def test_projection_examples(v, n, expected):
    np.testing.assert_allclose(project_simplex(v, n), expected, atol=1e-12)


def test_projection_rejects_nonpositive_total():
    with pytest.raises(ValidationError):
        project_simplex([1.0, 2.0], 0)


def test_projection_matches_generic_qp():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = int(rng.integers(2, 7))
        v = rng.normal(0, 5, m)
        n = float(rng.uniform(0.5, 20))
        res = minimize(
            lambda r: 0.5 * np.sum((r - v) ** 2), np.full(m, n / m), jac=lambda r: r - v,
            bounds=[(0, None)] * m, constraints=[{"type": "eq", "fun": lambda r: r.sum() - n}],
            method="SLSQP", options={"ftol": 1e-14, "maxiter": 500},
        )
        np.testing.assert_allclose(project_simplex(v, n), res.x, atol=1e-6)


# ---- rounding ----------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=8), st.integers(1, 200))
def test_rounding_preserves_total(parts, n):
    x = np.asarray(parts)
    x = project_simplex(x, n) if x.sum() == 0 else x / x.sum() * n
    r = round_largest_remainder(x, n)
    assert r.sum() == n and r.min() >= 0
    assert np.all(np.abs(r - x) < 1.0 + 1e-9)


def test_rounding_ties_go_to_lower_index():
    np.testing.assert_array_equal(round_largest_remainder([0.5, 0.5], 1), [1, 0])


# ---- MAP solver --------------------------------------------------------------

def test_small_lambda_flat_prior_keeps_feasible_noisy():
    rng = np.random.default_rng(1)
    T, m, n = 5, 3, 60
    noisy = np.stack([rng.dirichlet(np.full(m, 5.0)) * n for _ in range(T)])
    spec = ObjectiveSpec(1e-4, np.full((T, m), 1 / m), noisy, n)
    est, _ = solve_map(spec)
    for t in range(T):
        np.testing.assert_allclose(est.values[t], project_simplex(noisy[t], n), atol=1e-3)


def test_two_cell_example_beats_integer_grid():
    spec = ObjectiveSpec(1.0, [[0.5, 0.5]], [[1.4, 0.6]], 2)
    _, report = solve_map(spec)
    grid = min(step_objective(c, spec, 0) for c in ([0, 2], [1, 1], [2, 0]))
    assert report.total_objective <= grid + 1e-6


def test_deterministic_prior_takes_all_mass():
    spec = ObjectiveSpec(1.0, [[0.0, 1.0, 0.0]] * 3, [[40.0, -3.0, 12.0], [0, 0, 50], [9, 9, 9]], 20)
    for method in (SolverMethod.DUAL_BISECTION, SolverMethod.SUBGRADIENT):
        est, _ = solve_map(spec, SolverConfig(method=method))
        np.testing.assert_allclose(est.values, [[0, 20, 0]] * 3, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(2, 5), st.integers(1, 80), st.integers(1, 6), st.floats(0.05, 50),
    st.sampled_from(list(LogFactorialMode)), st.sampled_from(list(RoundMode)), st.integers(0, 2**32),
)
def test_feasibility(m, n, T, lam, mode, round_mode, seed):
    rng = np.random.default_rng(seed)
    spec = _random_spec(rng, m, n, T, lam, mode)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        est, report = solve_map(spec, SolverConfig(max_iters=300, round_mode=round_mode))
    assert np.all(np.abs(est.values.sum(axis=1) - n) <= 1e-6)
    assert est.values.min() >= 0
    assert np.all(report.residuals <= 1e-6) and np.all(report.min_entries >= 0)


def test_oracle_dominance_200_instances():
    rng = np.random.default_rng(2)
    for _ in range(200):
        m = int(rng.choice([2, 3]))
        n = int(rng.integers(1, 7))
        spec = _random_spec(rng, m, n)
        _, report = solve_map(spec, ROUNDED)
        _, best = brute_force_oracle(spec, 0)
        assert report.objectives[0] <= best + 1e-6


def test_dual_solution_matches_subgradient():
    rng = np.random.default_rng(3)
    spec = _random_spec(rng, 3, 40, T=8, lam=2.0)
    exact, rep_d = solve_map(spec, SolverConfig(method=SolverMethod.DUAL_BISECTION))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        approx, rep_s = solve_map(spec, SolverConfig(method=SolverMethod.SUBGRADIENT, max_iters=20000))
    assert np.all(rep_d.objectives <= rep_s.objectives + 1e-9)
    assert np.all(rep_s.objectives - rep_d.objectives <= 1e-3 * np.maximum(1, np.abs(rep_d.objectives)))


def test_dual_solution_is_a_continuous_minimizer():
    rng = np.random.default_rng(4)
    for _ in range(30):
        m = int(rng.integers(2, 5))
        spec = _random_spec(rng, m, int(rng.integers(3, 40)), lam=float(rng.uniform(0.5, 5)))
        est, report = solve_map(spec)
        x = est.values[0]
        # no feasible direction r + h(e_a - e_b) improves the objective
        for a in range(m):
            for b in range(m):
                if a != b and x[b] > 1e-7:
                    h = min(1e-4, x[b])
                    y = x.copy()
                    y[a] += h
                    y[b] -= h
                    assert step_objective(y, spec, 0) >= report.objectives[0] - 1e-9


def test_dual_rejects_stirling():
    spec = ObjectiveSpec(1.0, [[0.5, 0.5]], [[1.0, 1.0]], 2, LogFactorialMode.STIRLING)
    with pytest.raises(ValidationError):
        solve_map(spec, SolverConfig(method=SolverMethod.DUAL_BISECTION))


def test_best_objective_trace_is_monotone():
    rng = np.random.default_rng(5)
    spec = _random_spec(rng, 3, 30, T=4, mode=LogFactorialMode.STIRLING)
    _, report = solve_map(spec, SolverConfig(record_trace=True, max_iters=2000))
    trace = report.best_trace
    assert trace is not None and trace.shape[1:] == (3, 4)
    assert np.all(np.diff(trace, axis=0) <= 0)


@pytest.mark.parametrize("method", [SolverMethod.SUBGRADIENT, SolverMethod.DUAL_BISECTION])
def test_separability_bit_identical(method):
    rng = np.random.default_rng(6)
    spec = _random_spec(rng, 3, 25, T=6, lam=3.0)
    cfg = SolverConfig(method=method, max_iters=1500, round_mode=RoundMode.LARGEST_REMAINDER, seed=11)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        whole, rep = solve_map(spec, cfg)
        parts = [solve_map(spec.step(t), cfg) for t in range(spec.T)]
    joined = np.concatenate([p[0].values for p in parts])
    assert np.array_equal(whole.values, joined)
    assert np.array_equal(rep.objectives, np.concatenate([p[1].objectives for p in parts]))


def test_determinism():
    rng = np.random.default_rng(7)
    spec = _random_spec(rng, 4, 30, T=5, mode=LogFactorialMode.STIRLING)
    cfg = SolverConfig(seed=3, max_iters=800)
    a, _ = solve_map(spec, cfg)
    b, _ = solve_map(spec, cfg)
    assert np.array_equal(a.values, b.values)


def test_nonconvergence_is_a_warning_not_an_error():
    rng = np.random.default_rng(8)
    spec = _random_spec(rng, 3, 50, T=3, mode=LogFactorialMode.STIRLING)
    with pytest.warns(NonConvergence):
        est, report = solve_map(spec, SolverConfig(max_iters=3))
    assert report.nonconvergence
    assert np.all(np.abs(est.values.sum(axis=1) - 50) <= 1e-6)


def test_rounding_is_objective_guarded():
    rng = np.random.default_rng(9)
    spec = _random_spec(rng, 3, 12, T=10)
    real, rep_real = solve_map(spec)
    ints, rep_int = solve_map(spec, ROUNDED)
    for t in range(spec.T):
        if rep_int.rounded[t]:
            assert np.array_equal(ints.values[t], np.round(ints.values[t]))
            assert rep_int.objectives[t] <= rep_real.objectives[t] + 1e-6
        else:
            np.testing.assert_array_equal(ints.values[t], real.values[t])


def test_config_validation():
    for bad in ({"max_iters": 0}, {"tol": 0.0}, {"restarts": 0}):
        with pytest.raises(ValidationError):
            SolverConfig(**bad)


# ---- baseline ----------------------------------------------------------------

def test_baseline_examples():
    feasible = CountStream([[2.0, 1.0, 0.0]], StreamKind.NOISY)
    np.testing.assert_allclose(solve_baseline_mle(feasible, 1.0, 3).values, [[2, 1, 0]])
    est = solve_baseline_mle(CountStream([[2.0, -1.0]], StreamKind.NOISY), 1.0, 1)
    np.testing.assert_allclose(est.values, [[1, 0]])
    assert fidelity_term(est.values[0], [2, -1], 1.0) == pytest.approx(2.0)


def test_baseline_ignores_lambda():
    noisy = CountStream(np.random.default_rng(10).normal(3, 4, (6, 4)), StreamKind.NOISY)
    a = solve_baseline_mle(noisy, 0.1, 12).values
    b = solve_baseline_mle(noisy, 50.0, 12).values
    assert np.array_equal(a, b)


def test_baseline_attains_the_l1_optimum():
    rng = np.random.default_rng(11)
    for _ in range(50):
        m = int(rng.integers(2, 6))
        n = float(rng.integers(1, 50))
        y = rng.normal(n / m, 5, m)
        # r, u with u >= |y - r|
        c = np.concatenate([np.zeros(m), np.ones(m)])
        eye = np.eye(m)
        A_ub = np.block([[eye, -eye], [-eye, -eye]])
        b_ub = np.concatenate([y, -y])
        A_eq = np.concatenate([np.ones(m), np.zeros(m)])[None]
        lp = linprog(c, A_ub, b_ub, A_eq, [n], bounds=[(0, None)] * (2 * m))
        est = solve_baseline_mle(CountStream(y[None], StreamKind.NOISY), 1.0, n).values[0]
        assert np.abs(est - y).sum() == pytest.approx(lp.fun, abs=1e-7)


def test_baseline_rejects_bad_lambda():
    with pytest.raises(ValidationError):
        solve_baseline_mle(CountStream([[1.0]], StreamKind.NOISY), 0.0, 1)


# ---- oracle ------------------------------------------------------------------

def test_composition_counts():
    assert len(compositions(2, 2)) == 3
    assert len(compositions(3, 3)) == 10
    c = compositions(4, 3)
    assert len(c) == math.comb(6, 2) and np.all(c.sum(axis=1) == 4)
    assert [tuple(r) for r in c] == sorted(tuple(r) for r in c)


def test_oracle_symmetric_case():
    spec = ObjectiveSpec(1.0, [[1 / 3] * 3], [[1.0, 1.0, 1.0]], 3)
    arg, val = brute_force_oracle(spec, 0)
    np.testing.assert_array_equal(arg, [1, 1, 1])
    assert all(step_objective(c, spec, 0) >= val for c in compositions(3, 3))


def test_oracle_ties_are_lexicographic():
    spec = ObjectiveSpec(1.0, [[0.5, 0.5]], [[1.0, 1.0]], 1)
    arg, _ = brute_force_oracle(spec, 0)
    np.testing.assert_array_equal(arg, [0, 1])


def test_oracle_size_limit():
    spec = ObjectiveSpec(1.0, [[0.1] * 10], [[0.0] * 10], 60)
    with pytest.raises(InstanceTooLarge):
        brute_force_oracle(spec, 0)
