"""Command line: generate | release | postprocess | evaluate | sweep.

Exit status is 0 on success, 2 on invalid input (config, files, shapes) and
3 on any other failure.  Files written by a failed invocation are removed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pydantic

from .core_model import (
    CorrPostError,
    CountStream,
    DimensionMismatch,
    StreamKind,
    TransitionMatrix,
    ValidationError,
    read_json,
    write_json,
)
from .harness import (
    ExperimentConfig,
    Method,
    cell_seed,
    load_config,
    plausibility_count,
    postprocess,
    run_sweep,
    write_sweep,
)
from .mechanism import release_stream
from .metrics import mse, round_stream, stepwise_plausibility
from .synth import count_query, generate_trajectories

log = logging.getLogger("corrpost")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class InputError(ValidationError):
    pass


class _Outputs:
    """Tracks files written by this invocation so a failure can remove them."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.written.append(p)
        return p

    def json(self, name: str, obj) -> Path:
        p = self.path(name)
        write_json(obj, p)
        return p

    def cleanup(self):
        for p in self.written:
            p.unlink(missing_ok=True)


def _load_config(path) -> ExperimentConfig:
    try:
        return load_config(path)
    except FileNotFoundError as exc:
        raise InputError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc
    except pydantic.ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(x) for x in first["loc"]) or "<root>"
        raise InputError(f"{path}: field '{field}': {first['msg']}") from exc


def _load_stream(path, label: str) -> CountStream:
    try:
        return CountStream.from_dict(read_json(path))
    except FileNotFoundError as exc:
        raise InputError(f"{label} file not found: {path}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{label} file {path}: {exc}") from exc


def _load_matrix(path) -> TransitionMatrix:
    try:
        return TransitionMatrix.from_dict(read_json(path))
    except FileNotFoundError as exc:
        raise InputError(f"matrix file not found: {path}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"matrix file {path}: {exc}") from exc


def _point(config: ExperimentConfig, index: int):
    points = config.points()
    if not 0 <= index < len(points):
        raise InputError(f"--point {index} is out of range: the config has {len(points)} sweep points")
    return points[index]


def _seed(args, config: ExperimentConfig) -> int:
    if args.seed is not None:
        return args.seed
    return cell_seed(config.seed_base, args.point, args.run)


def cmd_generate(args, out: _Outputs):
    config = _load_config(args.config)
    _, T, s = _point(config, args.point)
    seed = _seed(args, config)
    traj = generate_trajectories(config.matrix(s), config.n_users, T, config.initial_distribution(), seed)
    out.json("trajectories.json", traj)
    out.json("true_counts.json", count_query(traj))
    out.json("matrix.json", config.matrix(s))


def cmd_release(args, out: _Outputs):
    config = _load_config(args.config)
    budget, _, _ = _point(config, args.point)
    truth_path = args.truth or Path(args.out) / "true_counts.json"
    truth = _load_stream(truth_path, "truth")
    if truth.kind is not StreamKind.TRUE:
        raise InputError(f"{truth_path}: expected kind 'true', got '{truth.kind.value}'")
    params = config.privacy(budget)
    out.json("noisy_counts.json", release_stream(truth, params, _seed(args, config)))
    out.json("privacy.json", params)


def cmd_postprocess(args, out: _Outputs):
    config = _load_config(args.config)
    budget, _, s = _point(config, args.point)
    noisy_path = args.noisy or Path(args.out) / "noisy_counts.json"
    noisy = _load_stream(noisy_path, "noisy")
    if noisy.kind is not StreamKind.NOISY:
        raise InputError(f"{noisy_path}: expected kind 'noisy', got '{noisy.kind.value}'")
    if args.matrix:
        tm, source = _load_matrix(args.matrix), str(args.matrix)
    else:
        tm, source = config.matrix(s), f"{args.config} (base_matrix, s={s})"
    if tm.m != noisy.m:
        raise DimensionMismatch(f"transition matrix from {source} has m={tm.m} but noisy counts from {noisy_path} have m={noisy.m}")
    n = noisy.n if noisy.n is not None else config.n_users
    method = Method(args.method) if args.method else (
        Method.MAP_FREQUENCY if config.prior_policy.value == "frequency" else Method.MAP_UNIFORM
    )
    est, obj = postprocess(method, noisy, tm, config.privacy(budget).lambda_, n, config, _seed(args, config))
    out.json("estimate.json", est)
    out.json("postprocess.json", {"method": method.value, "objective": obj})


def cmd_evaluate(args, out: _Outputs):
    est = _load_stream(args.estimate, "estimate")
    truth = _load_stream(args.truth, "truth")
    result = {"mse": mse(est, truth)}
    if args.matrix:
        tm = _load_matrix(args.matrix)
        if est.kind is not StreamKind.NOISY and est.n is not None and est.n <= args.plausibility_max_n:
            plaus = stepwise_plausibility(round_stream(est), tm)
            result["plausibility"] = plaus
            result["plausibility_violations"] = plausibility_count(est, tm)
    out.json("metrics.json", result)


def cmd_sweep(args, out: _Outputs):
    config = _load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed_base": args.seed})
    result = run_sweep(config, threads=args.threads)
    for p in write_sweep(result, args.out):
        out.written.append(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrpost", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="64-bit seed; defaults to the sweep cell seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--point", type=int, default=0, help="sweep point index (budget, T, s)")
        p.add_argument("--run", type=int, default=0, help="run index, used when --seed is omitted")

    p = sub.add_parser("generate", help="write trajectories and true counts")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("release", help="write Laplace-noised counts")
    common(p)
    p.add_argument("--truth", help="true counts (default: OUT/true_counts.json)")
    p.set_defaults(func=cmd_release)

    p = sub.add_parser("postprocess", help="write post-processed estimates")
    common(p)
    p.add_argument("--noisy", help="noisy counts (default: OUT/noisy_counts.json)")
    p.add_argument("--matrix", help="transition matrix (default: config base_matrix smoothed at the point's s)")
    p.add_argument("--method", choices=[m.value for m in Method])
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="write MSE (and plausibility) of an estimate")
    common(p, config_required=False)
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--matrix", help="transition matrix, enables plausibility")
    p.add_argument("--plausibility-max-n", type=int, default=5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run the full experiment grid")
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print(f"error: --seed must be a 64-bit unsigned integer, got {args.seed}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.threads < 1:
        print(f"error: --threads must be >= 1, got {args.threads}", file=sys.stderr)
        return EXIT_VALIDATION
    out = _Outputs(args.out)
    try:
        args.func(args, out)
    except (ValidationError, pydantic.ValidationError) as exc:
        out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CorrPostError as exc:
        out.cleanup()
        cause = exc.__cause__
        code = EXIT_VALIDATION if isinstance(cause, (ValidationError, pydantic.ValidationError)) else EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return code
    except Exception as exc:
        out.cleanup()
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
