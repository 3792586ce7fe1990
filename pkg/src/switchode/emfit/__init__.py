"""Penalised EM estimation of Markov-switching additive ODEs."""
from .fit import (
    FitConfig,
    FitResult,
    GroupedFitResult,
    default_lambda_grid,
    edge_set,
    fit,
    fit_grouped,
    lambda_path_fit,
    penalty_weight,
    oracle_fit,
    penalized_objective,
    support,
)
from .mstep import (
    feature_gram,
    group_lasso_bcd,
    group_penalty,
    kkt_residual,
    m_step_q,
    m_step_sigma,
    m_step_theta,
)
from .initialize import distinguishable, segment_init
from .params import ModelParams, init_params
from .posterior import (
    Posterior,
    e_step_statistics,
    emission_logdensity,
    emission_logmatrix,
    forward_backward,
    truncated_posterior,
)
