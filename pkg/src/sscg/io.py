"""File formats: Matrix Market matrices, factored-matrix checkpoints, problem directories.

Factored checkpoint (``.npz``): arrays ``left`` (n_A x r), ``core`` (r x r),
``right`` (n_B x r), scalar ``tail`` and the string ``format = "sscg-triple/1"``.

Problem directory::

    manifest.json      {"format": "sscg-problem/1", "metadata": {...},
                        "terms": [{"left": "A_1.mtx", "right": "B_1.mtx"}, ...],
                        "rhs": {"left": "C1.mtx", "right": "C2.mtx"},
                        "precond": {"p1": ["P1_E.mtx", "P1_D.mtx"], ...}}
    *.mtx              sparse coordinate files; C1/C2 are dense array files
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .lowrank import LowRankTriple, MultitermOperator, as_sym_sparse
from .problems import ProblemInstance

__all__ = [
    "read_matrix",
    "write_matrix",
    "save_triple",
    "load_triple",
    "save_problem",
    "load_problem",
    "TRIPLE_FORMAT",
    "PROBLEM_FORMAT",
]

TRIPLE_FORMAT = "sscg-triple/1"
PROBLEM_FORMAT = "sscg-problem/1"


def read_matrix(path) -> sp.csr_matrix:
    """Read a square Matrix Market file and symmetrize it."""
    m = scipy.io.mmread(str(path))
    return as_sym_sparse(m)


def write_matrix(path, m) -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(m), symmetry="general")


def save_triple(path, x: LowRankTriple) -> None:
    np.savez(path, left=x.left, core=x.core, right=x.right, tail=np.array(x.tail),
             format=np.array(TRIPLE_FORMAT))


def load_triple(path) -> LowRankTriple:
    with np.load(path, allow_pickle=False) as data:
        fmt = str(data["format"]) if "format" in data.files else None
        if fmt != TRIPLE_FORMAT:
            raise ValueError(f"{path}: not a factored-matrix checkpoint (format {fmt!r})")
        return LowRankTriple(data["left"], data["core"], data["right"], float(data["tail"]))


def save_problem(directory, problem: ProblemInstance) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    op = problem.operator
    terms = []
    written: dict[int, str] = {}

    def put(m, name):
        if id(m) in written:
            return written[id(m)]
        write_matrix(d / name, m)
        written[id(m)] = name
        return name

    for i, (a, b) in enumerate(zip(op.left, op.right), start=1):
        terms.append({"left": put(a, f"A_{i}.mtx"), "right": put(b, f"B_{i}.mtx")})
    c = problem.rhs
    scipy.io.mmwrite(str(d / "C1.mtx"), np.asarray(c.left @ c.core))
    scipy.io.mmwrite(str(d / "C2.mtx"), np.asarray(c.right))
    precond = {}
    for key, (m1, m2) in problem.precond_terms.items():
        precond[key] = [put(m1, f"{key}_1.mtx"), put(m2, f"{key}_2.mtx")]
    manifest = {
        "format": PROBLEM_FORMAT,
        "metadata": problem.metadata,
        "terms": terms,
        "rhs": {"left": "C1.mtx", "right": "C2.mtx"},
        "precond": precond,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_jsonable))
    return d


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def load_problem(directory) -> ProblemInstance:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"{d}: no manifest.json")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != PROBLEM_FORMAT:
        raise ValueError(f"{mf}: unsupported format {manifest.get('format')!r}")
    cache: dict[str, sp.csr_matrix] = {}

    def get(name):
        if name not in cache:
            cache[name] = read_matrix(d / name)
        return cache[name]

    terms = manifest["terms"]
    if not terms:
        raise ValueError(f"{mf}: empty term list")
    op = MultitermOperator([get(t["left"]) for t in terms], [get(t["right"]) for t in terms])
    c1 = np.asarray(scipy.io.mmread(str(d / manifest["rhs"]["left"])), dtype=float)
    c2 = np.asarray(scipy.io.mmread(str(d / manifest["rhs"]["right"])), dtype=float)
    rhs = LowRankTriple.from_factors(c1, c2)
    precond = {k: (get(v[0]), get(v[1])) for k, v in manifest.get("precond", {}).items()}
    return ProblemInstance(op, rhs, dict(manifest.get("metadata", {})), precond)
