"""Command-line interface: ``sscg {generate,solve,bench,validate}``.

Exit codes: 0 converged, 2 iteration limit reached, 1 error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .bench import (
    OUTPUT_ENV,
    PROBLEM_KINDS,
    SCHEMA_VERSION,
    SOLVER_DEFAULTS,
    ConfigError,
    build_solver_config,
    load_config,
    make_problem,
    run_experiment,
    run_method,
    validate_solution,
)
from .io import load_problem, load_triple, save_problem, save_triple

log = logging.getLogger("sscg")

EXIT_OK, EXIT_ERROR, EXIT_MAXIT = 0, 1, 2


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return {"true": True, "false": False}.get(text.lower(), text)


def _params(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    return out


def _add_problem_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--problem", choices=sorted(PROBLEM_KINDS), help="built-in problem generator")
    g.add_argument("--problem-dir", help="directory written by 'generate'")
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="generator parameter, repeatable (e.g. n=8000)")


def _add_solver_args(p):
    p.add_argument("--maxrank", type=int)
    p.add_argument("--tolrank", type=float)
    p.add_argument("--maxrank-r", type=int, dest="maxrank_r")
    p.add_argument("--tol", type=float)
    p.add_argument("--maxit", type=int)
    p.add_argument("--precond", choices=["none", "p1", "p2"])
    p.add_argument("--t-adi", type=int, dest="t_adi")
    p.add_argument("--shift-rule", choices=["geometric", "elliptic"], dest="shift_rule")
    p.add_argument("--adi-truncate", action="store_true", default=None, dest="adi_truncate",
                   help="recompress after every ADI step")
    p.add_argument("--residual", choices=["full", "dynamic", "randomized"])
    p.add_argument("--seed", type=int)
    p.add_argument("--beta-variant", choices=["derivation", "printed"], dest="beta_variant")
    p.add_argument("--symmetric", action="store_true", default=None,
                   help="single-factor iterates for symmetric problems")


def _solver_overrides(args) -> dict:
    return {k: getattr(args, k) for k in SOLVER_DEFAULTS if getattr(args, k, None) is not None}


def _output_dir(args, fallback: str) -> Path:
    return Path(args.output_dir or os.environ.get(OUTPUT_ENV) or fallback)


def _load(args):
    if args.problem_dir:
        return load_problem(args.problem_dir)
    return make_problem({"kind": args.problem, **_params(args.param)})


def cmd_generate(args) -> int:
    problem = make_problem({"kind": args.problem, **_params(args.param)})
    out = _output_dir(args, problem.name)
    save_problem(out, problem)
    n_a, n_b = problem.operator.shape
    print(f"wrote {problem.name} ({n_a} x {n_b}, {problem.operator.n_terms} terms) to {out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    problem = _load(args)
    settings = dict(SOLVER_DEFAULTS)
    if args.config:
        settings.update(load_config(args.config).solver)
    settings.update(_solver_overrides(args))
    cfg = build_solver_config(settings, problem)
    x, report = run_method(args.method, problem, cfg)
    out = _output_dir(args, "sscg-results")
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / f"{args.method}_report.csv")
    summary = report.summary()
    (out / f"{args.method}_summary.json").write_text(json.dumps(summary, indent=2))
    save_triple(out / "solution.npz", x)
    iters = report.iterations if report.status == "converged" else "--"
    print(f"{args.method}: status={report.status} iterations={iters} rank={x.rank} "
          f"final_true_relres={report.final_true_relres:.3e} ({report.total_millis / 1e3:.2f}s)")
    for note in report.annotations:
        print(f"note: {note}")
    if report.status == "converged":
        return EXIT_OK
    if report.status == "max_iterations":
        return EXIT_MAXIT
    print(f"error: {report.message}", file=sys.stderr)
    return EXIT_ERROR


def cmd_bench(args) -> int:
    cfg = load_config(args.config, _solver_overrides(args))
    out = args.output_dir or cfg.output_dir
    header = f"{'case':<10} {'problem':<36} {'method':<6} {'maxrank':>7} {'tol':>8} {'iter':>5} " \
             f"{'relres':>10} {'sec':>8}"
    print(f"schema_version {SCHEMA_VERSION}")
    print(header)

    def echo(row):
        print(f"{row['case']:<10} {row['problem'][:36]:<36} {row['method']:<6} {row['maxrank']:>7} "
              f"{row['tol']:>8.0e} {str(row['iterations']):>5} {row['final_true_relres']:>10.2e} "
              f"{row['seconds']:>8.2f}", flush=True)

    rows = run_experiment(cfg, output_dir=out, echo=echo)
    print(f"results in {out}")
    if any(r["status"] not in ("converged", "max_iterations") for r in rows):
        return EXIT_ERROR
    if any(r["status"] == "max_iterations" for r in rows):
        return EXIT_MAXIT
    return EXIT_OK


def cmd_validate(args) -> int:
    problem = _load(args)
    x = load_triple(args.solution)
    value, estimated = validate_solution(problem, x)
    flag = " (estimated)" if estimated else ""
    print(f"relative residual {value:.6e}{flag}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sscg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a built-in problem to a directory")
    g.add_argument("--problem", choices=sorted(PROBLEM_KINDS), required=True)
    g.add_argument("--param", action="append", metavar="KEY=VALUE")
    g.add_argument("-o", "--output-dir")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve one problem")
    _add_problem_args(s)
    s.add_argument("--method", choices=["sscg", "tpcg"], default="sscg")
    s.add_argument("--config", help="YAML file whose solver section supplies defaults")
    s.add_argument("-o", "--output-dir")
    _add_solver_args(s)
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="run an experiment configuration")
    b.add_argument("config")
    b.add_argument("-o", "--output-dir")
    _add_solver_args(b)
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("validate", help="relative residual of a saved solution")
    _add_problem_args(v)
    v.add_argument("solution", help=".npz checkpoint written by 'solve'")
    v.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
