"""Experiment sweeps: generate -> release -> post-process -> measure, with a fixed seed schedule.

Every sweep point is one (budget, T, s) combination; every (point, run) cell
draws fresh trajectories and noise from its own seed, and all methods of a
cell see the same data so their errors are paired.

Cell seed: 64-bit FNV-1a over the text ``"{seed_base}|{point_index}|{run}"``.
Generation, release and solver restarts draw from separate sub-streams of
that seed (see ``mechanism.make_rng``), which is what lets the CLI subcommands
reproduce a sweep row one stage at a time.
"""

from __future__ import annotations

import csv
import enum
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .core_model import (
    CorrPostError,
    CountStream,
    LocationDistribution,
    PriorPolicy,
    PrivacyMode,
    PrivacyParams,
    TransitionMatrix,
)
from .correlation import prior_distribution, propagate_matrix, smooth_correlations
from .mechanism import laplace_scale, release_stream
from .metrics import mse, plausibility_violations, round_stream, stepwise_plausibility
from .posterior import DEFAULT_FLOOR, LogFactorialMode, ObjectiveSpec
from .solver import RoundMode, SolverConfig, SolverMethod, solve_baseline_mle, solve_map
from .synth import count_query, generate_trajectories

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

RESULT_COLUMNS = ["method", "budget", "T", "s", "run", "seed", "mse", "plausibility_violations", "objective"]
MEAN_COLUMNS = [
    "method", "budget", "T", "s", "runs", "mse_mean", "mse_std",
    "plausibility_violations_mean", "objective_mean",
]
TIMING_COLUMNS = ["method", "budget", "T", "s", "run", "wall_ms"]


class Method(str, enum.Enum):
    MAP_FREQUENCY = "map_frequency"
    MAP_UNIFORM = "map_uniform"
    BASELINE_MLE = "baseline_mle"
    RAW_NOISY = "raw_noisy"


METHOD_ORDER = {m: i for i, m in enumerate(Method)}


class CellError(CorrPostError):
    pass


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def cell_seed(seed_base: int, point_index: int, run: int) -> int:
    return fnv1a64(f"{seed_base}|{point_index}|{run}")


class SolverSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_iters: int = Field(5000, ge=1)
    step_c: float = Field(1.0, gt=0)
    tol: float = Field(1e-8, gt=0)
    restarts: int = Field(3, ge=1)
    round_mode: RoundMode = RoundMode.NONE
    method: SolverMethod = SolverMethod.AUTO

    def build(self, seed: int) -> SolverConfig:
        return SolverConfig(
            max_iters=self.max_iters, step_c=self.step_c, tol=self.tol, restarts=self.restarts,
            round_mode=self.round_mode, method=self.method, seed=seed,
        )


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_matrix: list[list[float]]
    smoothing_s: list[float] = [0.0]
    budgets: list[float]
    budget_mode: PrivacyMode = PrivacyMode.PLAIN_DP
    scale_multiplier: float = Field(1.0, gt=0)
    sensitivity: float = Field(1.0, gt=0)
    T: int | list[int] = 500
    n_users: int = Field(200, ge=1)
    prior_policy: PriorPolicy = PriorPolicy.FREQUENCY
    runs: int = Field(50, ge=1)
    seed_base: int = Field(0, ge=0, le=2**64 - 1)
    solver: SolverSettings = SolverSettings()
    methods: list[Method] = list(Method)
    initial: list[float] | None = None
    stirling_mode: LogFactorialMode = LogFactorialMode.EXACT
    floor: float = Field(DEFAULT_FLOOR, gt=0)
    pin_zeros: bool = True
    plausibility_max_n: int = 5

    @field_validator("base_matrix")
    @classmethod
    def _matrix_ok(cls, v):
        TransitionMatrix(np.asarray(v, dtype=float))
        return v

    @field_validator("budgets")
    @classmethod
    def _budgets_ok(cls, v):
        if not v or any(not b > 0 for b in v):
            raise ValueError("budgets must be a non-empty list of positive numbers")
        return v

    @field_validator("smoothing_s")
    @classmethod
    def _s_ok(cls, v):
        if not v or any(not s >= 0 for s in v):
            raise ValueError("smoothing_s must be a non-empty list of nonnegative numbers")
        return v

    @field_validator("T")
    @classmethod
    def _t_ok(cls, v):
        ts = [v] if isinstance(v, int) else v
        if not ts or any(t < 1 for t in ts):
            raise ValueError("T must be a positive integer or a non-empty list of them")
        return v

    @field_validator("methods")
    @classmethod
    def _methods_ok(cls, v):
        if not v:
            raise ValueError("methods must not be empty")
        return sorted(set(v), key=METHOD_ORDER.__getitem__)

    @model_validator(mode="after")
    def _initial_ok(self):
        if self.initial is not None:
            dist = LocationDistribution(np.asarray(self.initial, dtype=float))
            if dist.m != len(self.base_matrix):
                raise ValueError(f"initial has {dist.m} entries but base_matrix is {len(self.base_matrix)}x{len(self.base_matrix)}")
        return self

    @property
    def Ts(self) -> list[int]:
        return [self.T] if isinstance(self.T, int) else list(self.T)

    def points(self) -> list[tuple[float, int, float]]:
        """(budget, T, s) for every sweep point, in point-index order."""
        return list(itertools.product(self.budgets, self.Ts, self.smoothing_s))

    def matrix(self, s: float) -> TransitionMatrix:
        return smooth_correlations(TransitionMatrix(np.asarray(self.base_matrix, dtype=float)), s)

    def privacy(self, budget: float) -> PrivacyParams:
        return PrivacyParams(budget, self.sensitivity, self.budget_mode, self.scale_multiplier)

    def initial_distribution(self) -> LocationDistribution | None:
        return None if self.initial is None else LocationDistribution(np.asarray(self.initial, dtype=float))


def postprocess(
    method: Method,
    noisy: CountStream,
    tm: TransitionMatrix,
    lam: float,
    n: int,
    config: ExperimentConfig,
    seed: int,
) -> tuple[CountStream, float | None]:
    """Apply one method; returns the released stream and the objective it minimized (None for raw)."""
    method = Method(method)
    if method is Method.RAW_NOISY:
        return noisy, None
    if method is Method.BASELINE_MLE:
        est = solve_baseline_mle(noisy, lam, n)
        return est, float(np.abs(noisy.values - est.values).sum() / lam)
    policy = PriorPolicy.FREQUENCY if method is Method.MAP_FREQUENCY else PriorPolicy.UNIFORM
    prior = prior_distribution(policy, noisy.values[0], n)
    probs = propagate_matrix(prior, tm, noisy.T)
    spec = ObjectiveSpec(lam, probs, noisy.values, n, config.stirling_mode, config.floor, config.pin_zeros)
    est, report = solve_map(spec, config.solver.build(seed))
    return est, report.total_objective


def plausibility_count(est: CountStream, tm: TransitionMatrix) -> int:
    return plausibility_violations(stepwise_plausibility(round_stream(est), tm))


def run_cell(config: ExperimentConfig, point_index: int, run: int):
    """All method rows for one (point, run) cell, plus their wall times in ms."""
    budget, T, s = config.points()[point_index]
    seed = cell_seed(config.seed_base, point_index, run)
    try:
        tm = config.matrix(s)
        truth = count_query(generate_trajectories(tm, config.n_users, T, config.initial_distribution(), seed))
        params = config.privacy(budget)
        lam = laplace_scale(params)
        noisy = release_stream(truth, params, seed)
        rows, timings = [], []
        for method in config.methods:
            t0 = time.perf_counter()
            est, obj = postprocess(method, noisy, tm, lam, config.n_users, config, seed)
            plaus = ""
            if method is not Method.RAW_NOISY and config.n_users <= config.plausibility_max_n:
                plaus = plausibility_count(est, tm)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            rows.append({
                "method": method.value, "budget": budget, "T": T, "s": s, "run": run, "seed": seed,
                "mse": mse(est, truth), "plausibility_violations": plaus,
                "objective": "" if obj is None else obj,
                "_point": point_index,
            })
            timings.append({"method": method.value, "budget": budget, "T": T, "s": s, "run": run, "wall_ms": wall_ms,
                            "_point": point_index})
        return rows, timings
    except Exception as exc:
        raise CellError(f"cell point={point_index} (budget={budget}, T={T}, s={s}) run={run} seed={seed}: {exc}") from exc


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class SweepResult:
    rows: list[dict]
    means: list[dict]
    timings: list[dict]


def _sort_key(row):
    return (METHOD_ORDER[Method(row["method"])], row["_point"], row["run"])


def _mean(values):
    vals = [float(v) for v in values if v != ""]
    return math.fsum(vals) / len(vals) if vals else ""


def summarize(rows: list[dict]) -> list[dict]:
    groups: dict = {}
    for row in rows:
        groups.setdefault((METHOD_ORDER[Method(row["method"])], row["_point"]), []).append(row)
    means = []
    for key in sorted(groups):
        g = groups[key]
        mses = np.array([r["mse"] for r in g], dtype=float)
        means.append({
            "method": g[0]["method"], "budget": g[0]["budget"], "T": g[0]["T"], "s": g[0]["s"],
            "runs": len(g),
            "mse_mean": _mean(mses),
            "mse_std": float(np.std(mses, ddof=1)) if len(g) > 1 else 0.0,
            "plausibility_violations_mean": _mean(r["plausibility_violations"] for r in g),
            "objective_mean": _mean(r["objective"] for r in g),
            "_point": key[1],
        })
    return means


def run_sweep(config: ExperimentConfig, threads: int = 1) -> SweepResult:
    tasks = [(config, p, r) for p in range(len(config.points())) for r in range(config.runs)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_cell_args, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    else:
        results = [_run_cell_args(t) for t in tasks]
    rows = sorted((r for rs, _ in results for r in rs), key=_sort_key)
    timings = sorted((t for _, ts in results for t in ts), key=_sort_key)
    return SweepResult(rows, summarize(rows), timings)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_sweep(result: SweepResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "results.csv", out / "means.csv", out / "timings.csv"]
    write_table(paths[0], result.rows, RESULT_COLUMNS)
    write_table(paths[1], result.means, MEAN_COLUMNS)
    write_table(paths[2], result.timings, TIMING_COLUMNS)
    return paths


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.model_validate(json.load(fh))

