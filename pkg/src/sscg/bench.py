"""Experiment configuration, parameter sweeps and result tables.

A configuration is a YAML mapping::

    schema_version: 1
    name: table2
    output_dir: results/table2
    methods: [sscg]                  # subset of {sscg, tpcg}
    solver:                          # shared solver settings
      tol: 1.0e-6
      maxit: 100
      tolrank: 1.0e-12
      maxrank: 20
      maxrank_r: null                # null -> 2 * maxrank
      residual: full                 # full | dynamic | randomized
      precond: p2                    # none | p1 | p2
      t_adi: 8
      shift_rule: geometric          # geometric | elliptic
      adi_truncate: false
      beta_variant: derivation       # derivation | printed
      symmetric: false
      seed: 0
    overrides:                       # per-method solver settings
      tpcg: {maxit: 300}
    cases:
      - problem: {kind: diffusion_reaction, n: 8000, gamma_kind: sin}
        sweep: {maxrank: [20], tol: [1.0e-6, 1.0e-8]}

A single case may be given with top-level ``problem`` and ``sweep`` keys
instead of ``cases``.  Problem kinds: ``diffusion_reaction``, ``heat1``,
``synthetic_kl``, ``random_spd`` and ``directory`` (with ``path``).
"""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .io import load_problem
from .lowrank import LowRankTriple
from .precond import PreconditionerSpec
from .problems import (
    ProblemInstance,
    gen_diffusion_reaction,
    gen_heat1,
    gen_random_spd,
    gen_synthetic_kl,
)
from .solver import ConvergenceReport, SolverConfig, solve_sscg
from .tpcg import solve_tpcg
from .truncation import TruncationParams, true_relative_residual

__all__ = [
    "SCHEMA_VERSION",
    "SUMMARY_COLUMNS",
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "make_problem",
    "build_solver_config",
    "run_method",
    "run_experiment",
    "validate_solution",
    "OUTPUT_ENV",
]

SCHEMA_VERSION = 1
OUTPUT_ENV = "SSCG_OUTPUT_DIR"
METHODS = ("sscg", "tpcg")
SUMMARY_COLUMNS = ("schema_version", "case", "problem", "method", "maxrank", "tol", "iterations",
                   "status", "final_true_relres", "relres_estimated", "seconds", "report")

SOLVER_DEFAULTS = {
    "tol": 1e-6,
    "maxit": 100,
    "tolrank": 1e-12,
    "maxrank": 20,
    "maxrank_r": None,
    "residual": "full",
    "precond": "none",
    "t_adi": 8,
    "shift_rule": "geometric",
    "adi_truncate": False,
    "beta_variant": "derivation",
    "symmetric": False,
    "seed": 0,
}

PROBLEM_KINDS = {
    "diffusion_reaction": (gen_diffusion_reaction, {"n", "gamma_kind"}),
    "heat1": (gen_heat1, {"n0", "delta"}),
    "synthetic_kl": (gen_synthetic_kl, {"n_a", "n_b", "n_terms", "decay", "seed", "sigma"}),
    "random_spd": (gen_random_spd, {"n_a", "n_b", "n_terms", "rhs_rank", "seed", "density"}),
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the key and line."""


@dataclass
class ExperimentConfig:
    name: str
    methods: list
    solver: dict
    overrides: dict
    cases: list
    output_dir: str
    seed: int = 0
    lines: dict = field(default_factory=dict, repr=False)


def _line_index(text: str) -> dict:
    """Map dotted key paths to 1-based source lines."""
    index: dict[str, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                index[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = f"{path}[{i}]"
                index[p] = v.start_mark.line + 1
                walk(v, p)

    root = yaml.compose(text, Loader=yaml.SafeLoader)
    if root is not None:
        walk(root, "")
    return index


def _fail(lines: dict, path: str, msg: str):
    probe = path
    while probe and probe not in lines:
        probe = probe.rsplit(".", 1)[0] if "." in probe else ""
    where = f" (line {lines[probe]})" if probe in lines else ""
    raise ConfigError(f"{path}{where}: {msg}")


def load_config(source, overrides: dict | None = None) -> ExperimentConfig:
    """Parse and validate a configuration file (path) or YAML text.

    ``overrides`` are solver settings from the command line; they replace the
    file's ``solver`` values, and a ``maxrank``/``tol`` override replaces the
    corresponding sweep list in every case.
    """
    if isinstance(source, (str, os.PathLike)) and Path(source).is_file():
        text = Path(source).read_text()
    elif isinstance(source, str):
        text = source
    else:
        raise ConfigError(f"configuration file not found: {source}")
    try:
        raw = yaml.safe_load(text)
        lines = _line_index(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"YAML parse error{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        _fail(lines, "schema_version", f"unsupported schema version {version!r}")
    known = {"schema_version", "name", "output_dir", "methods", "solver", "overrides", "cases",
             "problem", "sweep", "seed"}
    for key in raw:
        if key not in known:
            _fail(lines, str(key), "unknown key")

    methods = raw.get("methods", ["sscg"])
    if not isinstance(methods, list) or not methods:
        _fail(lines, "methods", "need at least one method")
    for i, m in enumerate(methods):
        if m not in METHODS:
            _fail(lines, f"methods[{i}]", f"unknown method {m!r}; choose from {METHODS}")

    solver = dict(SOLVER_DEFAULTS)
    solver.update(_check_solver(raw.get("solver") or {}, "solver", lines))
    if overrides:
        solver.update(_check_solver(overrides, "command line", {}))
    method_over = raw.get("overrides") or {}
    if not isinstance(method_over, dict):
        _fail(lines, "overrides", "must be a mapping of method -> settings")
    for m, vals in method_over.items():
        if m not in METHODS:
            _fail(lines, f"overrides.{m}", f"unknown method {m!r}")
        _check_solver(vals or {}, f"overrides.{m}", lines)

    if "cases" in raw:
        cases = raw["cases"]
        if not isinstance(cases, list) or not cases:
            _fail(lines, "cases", "need at least one case")
        prefix = "cases"
    else:
        if "problem" not in raw:
            _fail(lines, "problem", "missing problem (or cases)")
        cases = [{"problem": raw["problem"], "sweep": raw.get("sweep", {})}]
        prefix = None
    checked = []
    for i, case in enumerate(cases):
        base = f"{prefix}[{i}]" if prefix else ""
        dot = f"{base}." if base else ""
        if not isinstance(case, dict) or "problem" not in case:
            _fail(lines, base or "problem", "case needs a problem")
        prob = case["problem"]
        if not isinstance(prob, dict) or "kind" not in prob:
            _fail(lines, f"{dot}problem", "problem needs a kind")
        kind = prob["kind"]
        if kind == "directory":
            if "path" not in prob:
                _fail(lines, f"{dot}problem", "directory problem needs a path")
        elif kind not in PROBLEM_KINDS:
            _fail(lines, f"{dot}problem.kind", f"unknown problem kind {kind!r}")
        else:
            allowed = PROBLEM_KINDS[kind][1]
            for key in prob:
                if key != "kind" and key not in allowed:
                    _fail(lines, f"{dot}problem.{key}", f"unknown parameter for {kind}")
        sweep = dict(case.get("sweep") or {})
        for key in sweep:
            if key not in ("maxrank", "tol"):
                _fail(lines, f"{dot}sweep.{key}", "only maxrank and tol can be swept")
        for key in ("maxrank", "tol"):
            vals = sweep.get(key, [solver[key]])
            if not isinstance(vals, list):
                vals = [vals]
            if not vals:
                _fail(lines, f"{dot}sweep.{key}", "empty sweep")
            if overrides and key in overrides:
                vals = [overrides[key]]
            sweep[key] = vals
        case_solver = _check_solver(case.get("solver") or {}, f"{dot}solver", lines)
        checked.append({"problem": dict(prob), "sweep": sweep, "solver": case_solver,
                        "label": case.get("label", f"case{i}")})

    out = os.environ.get(OUTPUT_ENV) or raw.get("output_dir") or "sscg-results"
    return ExperimentConfig(name=str(raw.get("name", "experiment")), methods=list(methods),
                            solver=solver, overrides=method_over, cases=checked, output_dir=str(out),
                            seed=int(raw.get("seed", solver["seed"])), lines=lines)


def _check_solver(vals: dict, where: str, lines: dict) -> dict:
    if not isinstance(vals, dict):
        _fail(lines, where, "must be a mapping")
    for key in vals:
        if key not in SOLVER_DEFAULTS:
            _fail(lines, f"{where}.{key}", "unknown solver setting")
    return dict(vals)


def make_problem(spec: dict) -> ProblemInstance:
    """Build a problem from a ``{kind: ..., <params>}`` mapping."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "directory":
        return load_problem(spec["path"])
    if kind not in PROBLEM_KINDS:
        raise ValueError(f"unknown problem kind {kind!r}")
    fn, _ = PROBLEM_KINDS[kind]
    return fn(**spec)


def build_solver_config(settings: dict, problem: ProblemInstance, precond_cache: dict | None = None
                        ) -> SolverConfig:
    """Translate flat solver settings into a :class:`SolverConfig` for ``problem``."""
    s = dict(SOLVER_DEFAULTS)
    s.update(settings)
    trunc = TruncationParams(tolrank=float(s["tolrank"]), maxrank=int(s["maxrank"]),
                             maxrank_r=None if s["maxrank_r"] is None else int(s["maxrank_r"]))
    kind = s["precond"]
    key = (id(problem), kind, int(s["t_adi"]), s["shift_rule"], bool(s["adi_truncate"]))
    if precond_cache is not None and key in precond_cache:
        pc = precond_cache[key]
    else:
        pc = _make_precond(problem, kind, int(s["t_adi"]), s["shift_rule"], bool(s["adi_truncate"]))
        if precond_cache is not None:
            precond_cache[key] = pc
    return SolverConfig(tol=float(s["tol"]), maxit=int(s["maxit"]), truncation=trunc,
                        residual_strategy=s["residual"], seed=int(s["seed"]), precond=pc,
                        beta_rhs_variant=s["beta_variant"], symmetric_mode=bool(s["symmetric"]))


def _make_precond(problem, kind, t_adi, shift_rule, truncate_steps) -> PreconditionerSpec:
    if kind in ("none", "identity", None):
        return PreconditionerSpec.identity()
    if kind not in ("p1", "p2"):
        raise ValueError(f"unknown preconditioner {kind!r}; choose none, p1 or p2")
    if kind not in problem.precond_terms:
        raise ValueError(f"problem {problem.name!r} defines no {kind} preconditioner")
    m1, m2 = problem.precond_terms[kind]
    if kind == "p1":
        return PreconditionerSpec.one_term(m1, m2)
    return PreconditionerSpec.two_term_adi(m1, m2, t_adi=t_adi, truncate_steps=truncate_steps,
                                           shift_rule=shift_rule)


def run_method(method: str, problem: ProblemInstance, cfg: SolverConfig,
               x0: LowRankTriple | None = None) -> tuple[LowRankTriple, ConvergenceReport]:
    if method == "sscg":
        return solve_sscg(problem.operator, problem.rhs, x0, cfg)
    if method == "tpcg":
        return solve_tpcg(problem.operator, problem.rhs, x0, cfg)
    raise ValueError(f"unknown method {method!r}")


def _tag(v) -> str:
    return f"{v:g}".replace("+", "")


def run_experiment(config, overrides: dict | None = None, output_dir: str | None = None,
                   echo=None) -> list[dict]:
    """Run every (case, method, maxrank, tol) point and write the reports.

    Writes one per-iteration CSV per point plus ``summary.csv`` and
    ``summary.json`` into the output directory, and returns the summary rows.
    ``iterations`` is ``"--"`` for runs that hit ``maxit``.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config, overrides)
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    problems: dict[str, ProblemInstance] = {}
    pcache: dict = {}
    for case in cfg.cases:
        pkey = json.dumps(case["problem"], sort_keys=True)
        if pkey not in problems:
            problems[pkey] = make_problem(case["problem"])
        problem = problems[pkey]
        pname = _problem_label(case["problem"])
        for method in cfg.methods:
            for maxrank in case["sweep"]["maxrank"]:
                for tol in case["sweep"]["tol"]:
                    settings = dict(cfg.solver)
                    settings.update(case["solver"])
                    settings.update(cfg.overrides.get(method) or {})
                    settings["maxrank"], settings["tol"] = maxrank, tol
                    scfg = build_solver_config(settings, problem, pcache)
                    t0 = time.perf_counter()
                    _, report = run_method(method, problem, scfg)
                    seconds = time.perf_counter() - t0
                    fname = f"{case['label']}_{pname}_{method}_mr{maxrank}_tol{_tag(tol)}.csv"
                    report.to_csv(out / fname)
                    row = {
                        "schema_version": SCHEMA_VERSION,
                        "case": case["label"],
                        "problem": pname,
                        "method": method,
                        "maxrank": maxrank,
                        "tol": tol,
                        "iterations": report.iterations if report.status == "converged" else "--",
                        "status": report.status,
                        "final_true_relres": report.final_true_relres,
                        "relres_estimated": report.relres_estimated,
                        "seconds": round(seconds, 3),
                        "report": fname,
                    }
                    rows.append(row)
                    if echo:
                        echo(row)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "summary.json").write_text(json.dumps(
        {"schema_version": SCHEMA_VERSION, "name": cfg.name, "rows": rows}, indent=2))
    return rows


def _problem_label(spec: dict) -> str:
    parts = [str(spec["kind"])]
    for k in sorted(spec):
        if k not in ("kind", "path"):
            parts.append(f"{k}={spec[k]}")
    return "-".join(parts).replace("/", "_")


def validate_solution(problem: ProblemInstance, x: LowRankTriple,
                      max_entries: float = 5e7) -> tuple[float, bool]:
    """``||C - L(X)||_F / ||C||_F`` and whether it is a randomized estimate."""
    return true_relative_residual(problem.operator, problem.rhs, x, max_entries=max_entries)
