"""Simulation tools for the extremes of the 4D membrane model."""

__version__ = "0.1.0"

from .lattice import Lattice4, PrefixSum4, ball, box_sum, torus_distance
from .biharmonic import (
    GAMMA,
    PrecisionOperator,
    SolverHandle,
    assemble_precision,
    conditional_operators,
    green_diag,
    make_solver,
    solve,
)
from .field import (
    DysonParams,
    Field,
    centering_constant,
    dysonize,
    gibbs_markov_decompose,
    read_field,
    sample_membrane,
    write_field,
)
from .hierarchical import DyadicDepth, brw_cov, mbrw_cov, sample_brw, sample_mbrw
from .extremes import (
    PointProcessSample,
    TestFunction,
    derivative_martingale,
    extract_extremal_process,
    f_t_transform,
    laplace_functional,
    level_set,
    pair_max,
    top_ell_sum,
)
from .harness import (
    EstimatorResult,
    ExperimentConfig,
    empirical_cov,
    fit_exponential_tail,
    run_replicates,
)
