"""Deterministic single-process simulator of subspace-corrected federated
optimization on a matrix-regression benchmark with a closed-form optimum."""

from .engine import RunRecord, make_run_id, resolve_backend, run_experiment
from .problem import (
    ClientDataset,
    ModelState,
    ProblemConfig,
    SingularProblemError,
    closed_form_optimum,
    full_local_gradient,
    generate_federation,
    global_gradient,
    global_loss,
    local_loss,
    relative_error,
    smoothness_constant,
    stochastic_gradient,
)
from .rounds import ALGORITHMS, ControlState, OptimizerConfig, RoundOutput
from .subspace import Decomposition, Projector, backfill, decompose, generate_projector, lift

__version__ = "0.1.0"
