"""Low-rank subspace-conjugate gradient solvers for multiterm matrix equations."""
from .lowrank import (
    BlockFactorization,
    LowRankTriple,
    MultitermOperator,
    apply_operator_factored,
    energy_functional,
    frob_norm_factored,
    inner_product_factored,
    relative_change,
)
from .precond import PreconditionerSpec
from .problems import (
    ProblemInstance,
    build_subspace,
    dense_kron_solve,
    gen_diffusion_reaction,
    gen_heat1,
    gen_random_spd,
    gen_synthetic_kl,
)
from .solver import ConvergenceReport, SolverConfig, check_descent, solve_sscg, solve_sscg_symmetric
from .tpcg import solve_tpcg
from .truncation import TruncationParams, truncate_qrsvd

__version__ = "0.1.0"

__all__ = [
    "BlockFactorization",
    "ConvergenceReport",
    "LowRankTriple",
    "MultitermOperator",
    "PreconditionerSpec",
    "ProblemInstance",
    "SolverConfig",
    "TruncationParams",
    "apply_operator_factored",
    "build_subspace",
    "check_descent",
    "dense_kron_solve",
    "energy_functional",
    "frob_norm_factored",
    "gen_diffusion_reaction",
    "gen_heat1",
    "gen_random_spd",
    "gen_synthetic_kl",
    "inner_product_factored",
    "relative_change",
    "solve_sscg",
    "solve_sscg_symmetric",
    "solve_tpcg",
    "truncate_qrsvd",
]
