"""Exact temporal Gaussian-process inference through block-tridiagonal precisions."""
from . import btd
from ._accel import available_backends, default_backend
from .baselines import (
    dense_gp_mll,
    dense_gp_mll_and_gradient,
    dense_gp_predict,
    kf_filter,
    kf_mll,
    kf_mll_and_gradient,
    kf_rts_predict,
)
from .config import format_kernel, parse_kernel
from .data import generate_sinusoid_data, ingest_co2_csv
from .engine import (
    Dataset,
    NoiseModel,
    PosteriorSummary,
    add_observation_term,
    assemble_prior_precision,
    log_marginal_likelihood,
    merge_grid,
    mll_and_gradient,
    mll_gradient,
    predict,
)
from .errors import (
    DimensionMismatch,
    DuplicateTimestamps,
    InfeasibleStart,
    NegativeVariance,
    NotPositiveDefinite,
    NoValidRows,
    SingularProcessNoise,
)
from .kernels import (
    EQApprox,
    Matern12,
    Matern32,
    Matern52,
    StateSpaceModel,
    Sum,
    discretize,
    discretize_with_grad,
    eq_approx_ss,
    kernel_eval,
    state_space_of,
)
from .optimize import optimize_hyperparameters

__version__ = "0.1.0"
