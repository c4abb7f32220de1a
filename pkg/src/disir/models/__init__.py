"""Concrete targets and proposals."""
from .ppca import (
    SIGMA2,
    LinearGaussianProposal,
    PpcaModel,
    identity_statistic,
    ppca_exact_marginal_grad,
    ppca_exact_posterior,
    ppca_grad_theta,
    ppca_grad_z,
    ppca_log_joint,
    ppca_log_marginal,
    ppca_ml_solution,
    sample_augmented_target,
)
from .toys import (
    BimodalToy1D,
    DiscreteToyTarget,
    TransitionLaw,
    enumerate_transition_law,
    toy_trace,
)
