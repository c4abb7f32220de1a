"""Coupled ISIR/DISIR chains and the lagged coupled-chain runner."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .core import AugmentedState, ModelSpec, ProposalSpec, _normalize
from .kernels import (
    BetaController,
    _ar_fill,
    _as_x,
    _categorical,
    _disir_core,
    _log_weights,
    _update_beta,
    update_beta,
)

__all__ = [
    "CoupledState",
    "CoupledTrajectory",
    "coupled_categorical",
    "cdisir_step",
    "composed_coupled_step",
    "run_coupled_chains",
]


@dataclass(frozen=True)
class CoupledState:
    chain_a: AugmentedState
    chain_b: AugmentedState
    met: bool = False

    def __post_init__(self):
        if self.met and not self.chain_a.same_as(self.chain_b):
            raise ValueError("a met pair must hold identical states")


@dataclass(frozen=True, eq=False)
class CoupledTrajectory:
    """Histories of a lag-``L`` coupled run.

    ``history_a[t]`` is chain A at time ``t`` for ``t = 0..T`` and
    ``history_b[s]`` is chain B at time ``s = 0..T-L``; chain A at ``t`` was
    advanced jointly with chain B at ``t - L``.  ``tau`` is -1 for capped runs.
    ``betas[t]`` is the correlation strength after step ``t`` and ``mean_ess``
    the average ESS of chain A's correlated sub-steps (NaN for plain C-ISIR).
    ``max_log_weight`` is the largest log importance weight seen in the run,
    a diagnostic for the bounded-weight assumption (it is not enforced).
    """

    history_a: np.ndarray
    ells_a: np.ndarray
    history_b: np.ndarray
    ells_b: np.ndarray
    tau: int
    L: int
    t0: int
    capped: bool
    work: int
    betas: np.ndarray
    mean_ess: float = float("nan")
    max_log_weight: float = float("nan")

    @property
    def T(self) -> int:
        return self.history_a.shape[0] - 1

    def state_a(self, t: int) -> AugmentedState:
        return AugmentedState(self.history_a[t], int(self.ells_a[t]))

    def state_b(self, s: int) -> AugmentedState:
        return AugmentedState(self.history_b[s], int(self.ells_b[s]))

    @property
    def effective_tau(self) -> int:
        """``tau``, or ``T + 1`` when the run was capped before meeting."""
        return self.tau if not self.capped else self.T + 1


# ---------------------------------------------------------------------------
# compiled pieces


@numba.njit(cache=True)
def _coupled_categorical(p, q, rng):
    """Maximal coupling of two normalised categoricals."""
    K = p.size
    gamma = 0.0
    for k in range(K):
        gamma += abs(p[k] - q[k])
    gamma *= 0.5
    u = rng.random()
    if u <= 1.0 - gamma:
        m = np.minimum(p, q)
        s = m.sum()
        if s > 0.0:
            k = _categorical(m / s, rng.random())
            return k, k, True
    ra = np.maximum(p - q, 0.0)
    rb = np.maximum(q - p, 0.0)
    ka = _categorical(ra / ra.sum(), rng.random())
    kb = _categorical(rb / rb.sum(), rng.random())
    return ka, kb, False


@numba.njit
def _cdisir_core(xa, la, xb, lb, beta, theta, phi, x, log_joint, log_density, reparam, rng):
    K, D = xa.shape
    laux = rng.integers(0, K)
    noise = rng.standard_normal((K - 1, D))
    oa = np.empty_like(xa)
    ob = np.empty_like(xb)
    oa[laux] = xa[la]
    ob[laux] = xb[lb]
    _ar_fill(oa, laux, beta, noise)
    _ar_fill(ob, laux, beta, noise)
    lwa = _log_weights(theta, phi, x, oa, log_joint, log_density, reparam)
    lwb = _log_weights(theta, phi, x, ob, log_joint, log_density, reparam)
    pa, _ = _normalize(lwa)
    pb, _ = _normalize(lwb)
    na, nb, _ = _coupled_categorical(pa, pb, rng)
    return oa, na, ob, nb, pa, max(lwa.max(), lwb.max())


@numba.njit(cache=True)
def _same(xa, la, xb, lb):
    if la != lb:
        return False
    return np.array_equal(xa, xb)


@numba.njit(cache=True)
def _grow(hist, ells, n):
    if n < hist.shape[0]:
        return hist, ells
    cap = 2 * hist.shape[0]
    h2 = np.empty((cap, hist.shape[1], hist.shape[2]))
    e2 = np.empty(cap, dtype=np.int64)
    h2[: hist.shape[0]] = hist
    e2[: ells.shape[0]] = ells
    return h2, e2


@numba.njit(nogil=True)
def _run_coupled(
    K, D, L, t0, max_iterations, beta0, adapt, exploit,
    step, target, lo, hi,
    theta, phi, x, log_joint, log_density, reparam, rng,
):
    cap = 64
    ha = np.empty((cap, K, D))
    la_hist = np.empty(cap, dtype=np.int64)
    hb = np.empty((cap, K, D))
    lb_hist = np.empty(cap, dtype=np.int64)
    betas = np.empty(cap)

    xa = rng.standard_normal((K, D))
    la = rng.integers(0, K)
    ha[0] = xa
    la_hist[0] = la
    beta = beta0
    betas[0] = beta
    work = 0
    ess_sum = 0.0
    ess_n = 0
    max_lw = -np.inf

    for t in range(1, L + 1):
        xa, la, _, lw, p = _disir_core(xa, la, 0.0, theta, phi, x, log_joint, log_density, reparam, rng)
        work += 1
        max_lw = max(max_lw, lw.max())
        if exploit:
            xa, la, _, lw, p = _disir_core(xa, la, beta, theta, phi, x, log_joint, log_density, reparam, rng)
            work += 1
            max_lw = max(max_lw, lw.max())
            ess_sum += 1.0 / np.dot(p, p)
            ess_n += 1
            if adapt:
                beta = _update_beta(beta, 1.0 / np.dot(p, p), K, step, target, lo, hi)
        ha, la_hist = _grow(ha, la_hist, t)
        if t >= betas.shape[0]:
            b2 = np.empty(2 * betas.shape[0])
            b2[: betas.shape[0]] = betas
            betas = b2
        ha[t] = xa
        la_hist[t] = la
        betas[t] = beta

    xb = rng.standard_normal((K, D))
    lb = rng.integers(0, K)
    hb[0] = xb
    lb_hist[0] = lb

    t = L
    met = _same(xa, la, xb, lb)
    tau = L if met else -1
    capped = False
    while t < t0 + L - 1 or not met:
        if t >= max_iterations:
            capped = True
            break
        xa, la, xb, lb, p, mlw = _cdisir_core(
            xa, la, xb, lb, 0.0, theta, phi, x, log_joint, log_density, reparam, rng
        )
        work += 2
        max_lw = max(max_lw, mlw)
        if exploit:
            xa, la, xb, lb, p, mlw = _cdisir_core(
                xa, la, xb, lb, beta, theta, phi, x, log_joint, log_density, reparam, rng
            )
            work += 2
            max_lw = max(max_lw, mlw)
            ess_sum += 1.0 / np.dot(p, p)
            ess_n += 1
            if adapt:
                beta = _update_beta(beta, 1.0 / np.dot(p, p), K, step, target, lo, hi)
        t += 1
        ha, la_hist = _grow(ha, la_hist, t)
        hb, lb_hist = _grow(hb, lb_hist, t - L)
        if t >= betas.shape[0]:
            b2 = np.empty(2 * betas.shape[0])
            b2[: betas.shape[0]] = betas
            betas = b2
        ha[t] = xa
        la_hist[t] = la
        hb[t - L] = xb
        lb_hist[t - L] = lb
        betas[t] = beta
        if not met and _same(xa, la, xb, lb):
            met = True
            tau = t
    if capped:
        tau = -1
    mean_ess = ess_sum / ess_n if ess_n > 0 else np.nan
    return (
        ha[: t + 1].copy(), la_hist[: t + 1].copy(),
        hb[: t - L + 1].copy(), lb_hist[: t - L + 1].copy(),
        tau, capped, work, betas[: t + 1].copy(), mean_ess, max_lw,
    )


# ---------------------------------------------------------------------------
# public API


def coupled_categorical(w, v, rng: np.random.Generator) -> tuple[int, int, bool]:
    """Draw ``(ell, ell_bar)`` from the maximal coupling of ``Cat(w)`` and ``Cat(v)``.

    Args:
        w, v: non-negative, unnormalised probability vectors of equal length.
        rng: stream; consumes one uniform for the branch and then one (coupled)
            or two (uncoupled) uniforms for the index draws.

    Returns:
        The two 0-based indices and whether they were drawn coupled.
    """
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    if w.shape != v.shape or w.ndim != 1:
        raise ValueError("w and v must be vectors of equal length")
    for name, a in (("w", w), ("v", v)):
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError(f"{name} must be finite and non-negative")
        if a.sum() <= 0:
            raise ValueError(f"{name} has zero total mass")
    ka, kb, coupled = _coupled_categorical(w / w.sum(), v / v.sum(), rng)
    return int(ka), int(kb), bool(coupled)


def cdisir_step(
    pair: CoupledState,
    beta: float,
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    rng: np.random.Generator,
) -> CoupledState:
    """One C-DISIR transition: shared auxiliary index and innovations, coupled resampling."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    state, _ = _coupled_substep(pair, beta, model, proposal, x, rng)
    return state


def _coupled_substep(pair, beta, model, proposal, x, rng):
    a, b = pair.chain_a, pair.chain_b
    oa, na, ob, nb, pa, _ = _cdisir_core(
        np.ascontiguousarray(a.xis), a.ell, np.ascontiguousarray(b.xis), b.ell, float(beta),
        model.theta, proposal.phi, _as_x(x),
        model.log_joint, proposal.log_density, proposal.reparam, rng,
    )
    new_a = AugmentedState(oa, int(na))
    new_b = AugmentedState(ob, int(nb))
    return CoupledState(new_a, new_b, pair.met or new_a.same_as(new_b)), pa


def composed_coupled_step(
    pair: CoupledState,
    controller: BetaController,
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    rng: np.random.Generator,
    exploit: bool = True,
) -> tuple[CoupledState, BetaController]:
    """C-ISIR sub-step then C-DISIR sub-step at ``controller.beta``.

    The shared controller is updated from chain A's ESS in the second
    sub-step.  ``exploit=False`` gives the plain C-ISIR kernel.
    """
    pair, _ = _coupled_substep(pair, 0.0, model, proposal, x, rng)
    if exploit:
        pair, pa = _coupled_substep(pair, controller.beta, model, proposal, x, rng)
        controller = update_beta(controller, 1.0 / float(np.dot(pa, pa)), pa.size)
    met = pair.chain_a.same_as(pair.chain_b)
    return CoupledState(pair.chain_a, pair.chain_b, met), controller


def run_coupled_chains(
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    config,
    rng: np.random.Generator,
) -> CoupledTrajectory:
    """Run chain A for ``L`` composed steps, then the lagged pair until meeting.

    Both chains start from ``xi_k ~ N(0, I)`` with a uniform index; chain B's
    start is drawn after chain A's first ``L`` steps.  Stops once
    ``t >= t0 + L - 1`` and the pair has met, or when ``t`` reaches
    ``config.max_iterations`` (the trajectory is then flagged ``capped``).
    Under ``beta_policy="fixed"`` the correlation strength stays at
    ``config.beta_init`` for the whole run; ``"adaptive"`` applies the ESS
    update after every composed step.

    Args:
        config: an :class:`~disir.estimators.EstimatorConfig`.
    """
    if config.K < 2 or config.L < 1 or config.t0 < 0:
        raise ValueError("need K >= 2, L >= 1, t0 >= 0")
    ctrl = config.controller()
    ha, la, hb, lb, tau, capped, work, betas, mean_ess, max_lw = _run_coupled(
        config.K, model.latent_dim, config.L, config.t0, config.max_iterations,
        ctrl.beta, not ctrl.frozen, config.exploit,
        ctrl.step_size, ctrl.target_fraction, ctrl.clamp_lo, ctrl.clamp_hi,
        model.theta, proposal.phi, _as_x(x),
        model.log_joint, proposal.log_density, proposal.reparam, rng,
    )
    return CoupledTrajectory(
        ha, la, hb, lb, int(tau), config.L, config.t0, bool(capped), int(work), betas,
        float(mean_ess), float(max_lw),
    )
