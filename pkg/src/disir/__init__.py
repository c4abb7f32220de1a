"""Dependent ISIR kernels, couplings and unbiased gradient estimators for latent-variable models."""
from .core import (
    AugmentedState,
    DegenerateWeightsError,
    ModelSpec,
    ParamLayout,
    PhiGradientHooks,
    ProposalSpec,
    SupportError,
    WeightVector,
    ess,
    log_weight,
    log_weights,
    normalize_log_weights,
    rng_stream,
)
from .coupling import (
    CoupledState,
    CoupledTrajectory,
    cdisir_step,
    composed_coupled_step,
    coupled_categorical,
    run_coupled_chains,
)
from .estimators import (
    CappedRunError,
    EstimatorConfig,
    GradientEstimate,
    SignedMeasure,
    WeightedStatistic,
    elbo_gradient_theta,
    h_rao_blackwell,
    iwae_bound_estimate,
    iwae_gradient_theta,
    iwae_phi_gradient,
    rmsprop_update,
    run_chain,
    signed_measure,
    unbiased_estimate,
    unbiased_expectation,
    unbiased_gradient,
)
from .kernels import (
    BetaController,
    KernelDiagnostics,
    composed_step,
    disir_step,
    isir_step_zspace,
    selected_latent,
    update_beta,
)

__version__ = "0.1.0"
