"""Bias-variance reduced local perturbed SGD on a simulated cluster."""

from ._jit import BACKEND
from .diagnostics import (
    SospReport,
    estimate_zeta,
    full_gradient_norm,
    min_eigenvalue,
    scan_history_for_sosp,
)
from .optimizers import (
    ALGORITHMS,
    RunAborted,
    RunConfig,
    Trace,
    recommend_hyperparameters,
    run_bvr_l_psgd,
    run_bvr_l_sgd,
    run_local_sgd,
    run_minibatch_sarah,
    run_minibatch_sgd,
    run_noisy_minibatch_sgd,
)
from .problems import (
    ContractError,
    build_mlp_softplus,
    build_problem,
    build_quartic_saddle,
    build_softmax_regression,
    partition_label_skew,
)

__version__ = "0.1.0"
