"""Single-chain ISIR/DISIR kernels and the ESS-driven correlation controller.

The compiled ``_*_core`` functions are shared with :mod:`disir.coupling`;
the public functions wrap them for one step at a time.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numba
import numpy as np

from .core import (
    AugmentedState,
    ModelSpec,
    ProposalSpec,
    SupportError,
    _normalize,
    normalize_log_weights,
)

__all__ = [
    "BetaController",
    "KernelDiagnostics",
    "disir_step",
    "isir_step_zspace",
    "composed_step",
    "update_beta",
    "selected_latent",
]


@dataclass(frozen=True)
class BetaController:
    """Correlation strength plus the constants of its ESS-targeting update."""

    beta: float = 0.5
    target_fraction: float = 0.3
    step_size: float = 0.01
    clamp_lo: float = 1e-6
    clamp_hi: float = 1.0 - 1e-6
    frozen: bool = False

    def __post_init__(self):
        if not self.clamp_lo <= self.clamp_hi:
            raise ValueError("clamp_lo must not exceed clamp_hi")
        if not self.clamp_lo <= self.beta <= self.clamp_hi:
            object.__setattr__(self, "beta", _clamp(self.beta, self.clamp_lo, self.clamp_hi))


@dataclass(frozen=True)
class KernelDiagnostics:
    ess_last: float
    accepted_move: bool
    max_log_weight: float
    aux_index: int
    log_weights: np.ndarray


def _clamp(v, lo, hi):
    return min(max(v, lo), hi)


def update_beta(controller: BetaController, ess_value: float, K: int) -> BetaController:
    """``beta <- clamp(beta - step * (ESS - target_fraction * K))``."""
    if controller.frozen:
        return controller
    beta = _update_beta(
        controller.beta, float(ess_value), int(K), controller.step_size,
        controller.target_fraction, controller.clamp_lo, controller.clamp_hi,
    )
    return replace(controller, beta=beta)


# ---------------------------------------------------------------------------
# compiled building blocks


@numba.njit(cache=True)
def _update_beta(beta, ess_value, K, step, target, lo, hi):
    b = beta - step * (ess_value - target * K)
    if b < lo:
        return lo
    if b > hi:
        return hi
    return b


@numba.njit(cache=True)
def _categorical(p, u):
    """Inverse-CDF draw; the lowest index wins ties."""
    c = 0.0
    n = p.size
    for k in range(n):
        c += p[k]
        if u < c:
            return k
    # rounding left the cumulative sum below u
    for k in range(n - 1, -1, -1):
        if p[k] > 0.0:
            return k
    return n - 1


@numba.njit(cache=True)
def _ar_fill(out, laux, beta, noise):
    """Autoregressive fill of every slot but ``laux``; ``noise`` has K-1 rows."""
    K, D = out.shape
    c = np.sqrt(1.0 - beta * beta)
    for k in range(laux + 1, K):
        for d in range(D):
            out[k, d] = beta * out[k - 1, d] + c * noise[k - 1, d]
    for k in range(laux - 1, -1, -1):
        for d in range(D):
            out[k, d] = beta * out[k + 1, d] + c * noise[k, d]


@numba.njit
def _log_weights(theta, phi, x, xis, log_joint, log_density, reparam):
    zs = reparam(phi, xis, x)
    lw = log_joint(theta, x, zs) - log_density(phi, x, zs)
    for k in range(lw.size):
        if not np.isfinite(lw[k]):
            raise SupportError("non-finite log-weight at slot", k)
    return lw


@numba.njit
def _disir_core(xis, ell, beta, theta, phi, x, log_joint, log_density, reparam, rng):
    K, D = xis.shape
    laux = rng.integers(0, K)
    noise = rng.standard_normal((K - 1, D))
    out = np.empty_like(xis)
    out[laux] = xis[ell]
    _ar_fill(out, laux, beta, noise)
    lw = _log_weights(theta, phi, x, out, log_joint, log_density, reparam)
    p, _ = _normalize(lw)
    new_ell = _categorical(p, rng.random())
    return out, new_ell, laux, lw, p


# ---------------------------------------------------------------------------
# public steps


def _as_x(x) -> np.ndarray:
    return np.ascontiguousarray(np.atleast_1d(np.asarray(x, dtype=float)))


def _diagnostics(lw, p, new_ell, laux) -> KernelDiagnostics:
    return KernelDiagnostics(
        ess_last=float(1.0 / np.dot(p, p)),
        accepted_move=bool(new_ell != laux),
        max_log_weight=float(lw.max()),
        aux_index=int(laux),
        log_weights=lw,
    )


def disir_step(
    state: AugmentedState,
    beta: float,
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    rng: np.random.Generator,
) -> tuple[AugmentedState, KernelDiagnostics]:
    """One DISIR transition; ``beta = 0`` is reparameterised ISIR.

    Draws, in order: the auxiliary index, ``K - 1`` fresh noise vectors, and
    one uniform for the categorical resampling.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    out, new_ell, laux, lw, p = _disir_core(
        np.ascontiguousarray(state.xis), state.ell, float(beta), model.theta, proposal.phi,
        _as_x(x), model.log_joint, proposal.log_density, proposal.reparam, rng,
    )
    return AugmentedState(out, int(new_ell)), _diagnostics(lw, p, new_ell, laux)


def composed_step(
    state: AugmentedState,
    controller: BetaController,
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    rng: np.random.Generator,
    exploit: bool = True,
) -> tuple[AugmentedState, BetaController, KernelDiagnostics]:
    """ISIR step followed by a DISIR step at ``controller.beta``.

    The controller is updated afterwards from the ESS of the DISIR sub-step.
    With ``exploit=False`` only the ISIR sub-step runs and the controller is
    returned untouched.
    """
    state, diag = disir_step(state, 0.0, model, proposal, x, rng)
    if not exploit:
        return state, controller, diag
    state, diag = disir_step(state, controller.beta, model, proposal, x, rng)
    return state, update_beta(controller, diag.ess_last, state.K), diag


def isir_step_zspace(
    zs: np.ndarray,
    ell: int,
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    rng: np.random.Generator,
) -> tuple[np.ndarray, int]:
    """ISIR transition on latent values, sampling the proposal directly.

    Requires ``proposal.sample(phi, x, n, rng) -> (n, D)``.  Used to check
    that reparameterised ISIR has the same law.
    """
    if proposal.sample is None:
        raise NotImplementedError("proposal has no direct sampler")
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    x = _as_x(x)
    K = zs.shape[0]
    laux = int(rng.integers(0, K))
    fresh = np.asarray(proposal.sample(proposal.phi, x, K - 1, rng), dtype=float).reshape(K - 1, -1)
    out = np.empty_like(zs)
    out[laux] = zs[ell]
    out[np.arange(K) != laux] = fresh
    lw = model.log_joint(model.theta, x, out) - proposal.log_density(proposal.phi, x, out)
    if not np.all(np.isfinite(lw)):
        raise SupportError(f"non-finite log-weight at slot {int(np.flatnonzero(~np.isfinite(lw))[0])}")
    w = normalize_log_weights(lw)
    return out, int(_categorical(w.normalized, rng.random()))


def selected_latent(state: AugmentedState, proposal: ProposalSpec, x) -> np.ndarray:
    """``g_phi(xi_ell, x)``, the latent value the chain currently represents."""
    return proposal.reparam(proposal.phi, np.ascontiguousarray(state.xis[state.ell : state.ell + 1]), _as_x(x))[0]

