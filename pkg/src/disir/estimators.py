"""Lagged unbiased estimators, biased IWAE baselines, proposal gradients and RMSProp."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Optional

import numba
import numpy as np

from .core import AugmentedState, ModelSpec, ProposalSpec, SupportError, _normalize
from .coupling import CoupledTrajectory, run_coupled_chains
from .kernels import BetaController, _as_x, _disir_core, _update_beta

__all__ = [
    "CappedRunError",
    "EstimatorConfig",
    "GradientEstimate",
    "WeightedStatistic",
    "SignedMeasure",
    "h_rao_blackwell",
    "unbiased_estimate",
    "signed_measure",
    "unbiased_expectation",
    "unbiased_gradient",
    "calibrate_beta",
    "elbo_gradient_theta",
    "iwae_gradient_theta",
    "iwae_bound_estimate",
    "iwae_phi_gradient",
    "rmsprop_update",
    "run_chain",
    "fit_proposal",
]


class CappedRunError(RuntimeError):
    """A coupled run hit ``max_iterations`` before the chains met."""


BETA_POLICIES = ("adaptive", "fixed")
CAPPED_POLICIES = ("error", "accept")


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings of the lagged coupled estimator.

    Attributes:
        K: importance samples per state.
        L: lag between the two chains.
        t0: burn-in; the estimator starts averaging at time ``t0``.
        max_iterations: cap on the coupled-run time index.
        beta_init: starting correlation strength.
        seed: base seed for callers that build their own streams.
        beta_policy: ``"fixed"`` holds ``beta_init`` for the whole coupled
            run, so both chains share one invariant kernel; ``"adaptive"``
            updates beta from the ESS after every composed step.  Use
            :func:`calibrate_beta` to pick ``beta_init`` beforehand.
        exploit: ``False`` drops the correlated sub-step (plain C-ISIR).
        capped_policy: ``"error"`` raises on capped runs, ``"accept"``
            returns the truncated sum flagged as capped.
    """

    K: int = 10
    L: int = 10
    t0: int = 1
    max_iterations: int = 1000
    beta_init: float = 0.5
    seed: int = 0
    beta_policy: str = "fixed"
    exploit: bool = True
    capped_policy: str = "error"

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.t0 < 0:
            raise ValueError("t0 must be >= 0")
        if self.max_iterations < self.t0 + self.L:
            raise ValueError("max_iterations must be at least t0 + L")
        if not 0.0 <= self.beta_init < 1.0:
            raise ValueError("beta_init must lie in [0, 1)")
        if self.beta_policy not in BETA_POLICIES:
            raise ValueError(f"beta_policy must be one of {BETA_POLICIES}")
        if self.capped_policy not in CAPPED_POLICIES:
            raise ValueError(f"capped_policy must be one of {CAPPED_POLICIES}")

    def controller(self) -> BetaController:
        return BetaController(beta=self.beta_init, frozen=self.beta_policy == "fixed")


@dataclass(frozen=True)
class GradientEstimate:
    """Output of :func:`unbiased_gradient`.

    ``tau`` is the largest meeting time over the batch (-1 if any run was
    capped), ``work`` the total number of kernel sub-steps and ``taus`` the
    per-datapoint meeting times.  ``mean_ess`` holds, per datapoint, the
    average ESS of chain A's correlated sub-steps; callers feed it to
    :func:`~disir.kernels.update_beta` between runs.  ``max_log_weight`` is
    the largest log importance weight seen in any run of the batch.
    """

    value: np.ndarray
    tau: int
    capped: bool
    work: int
    taus: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mean_ess: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_log_weight: float = float("nan")


# ---------------------------------------------------------------------------
# weighted statistics


@numba.njit
def _weighted_stat_many(hist, theta, phi, x, log_joint, log_density, reparam, stat):
    """``sum_k w_k stat(z_k)`` for every noise stack in ``hist``."""
    n = hist.shape[0]
    first = True
    out = np.empty((0, 0))
    for i in range(n):
        zs = reparam(phi, hist[i], x)
        lw = log_joint(theta, x, zs) - log_density(phi, x, zs)
        for k in range(lw.size):
            if not np.isfinite(lw[k]):
                raise SupportError("non-finite log-weight at slot", k)
        p, _ = _normalize(lw)
        g = stat(theta, x, zs)
        if first:
            out = np.zeros((n, g.shape[1]))
            first = False
        for k in range(g.shape[0]):
            for j in range(g.shape[1]):
                if not np.isfinite(g[k, j]):
                    raise SupportError("non-finite statistic at slot", k)
                out[i, j] += p[k] * g[k, j]
    return out


class WeightedStatistic:
    """``h(state) = sum_k w_k f(z_k)`` with ``z_k = g_phi(xi_k, x)``.

    ``stat(theta, x, zs) -> (K, P)`` must be a numba dispatcher; the default
    is the model's ``grad_theta_log_joint``, which gives the Rao-Blackwellised
    gradient integrand.  The value does not depend on the selected index.
    """

    def __init__(self, model: ModelSpec, proposal: ProposalSpec, x, stat: Optional[Callable] = None):
        self.model = model
        self.proposal = proposal
        self.x = _as_x(x)
        self.stat = model.grad_theta_log_joint if stat is None else stat

    def many(self, xis_stack: np.ndarray) -> np.ndarray:
        xis_stack = np.ascontiguousarray(xis_stack, dtype=float)
        if xis_stack.shape[0] == 0:
            return np.zeros((0, 0))
        return _weighted_stat_many(
            xis_stack, self.model.theta, self.proposal.phi, self.x,
            self.model.log_joint, self.proposal.log_density, self.proposal.reparam, self.stat,
        )

    def __call__(self, state: AugmentedState) -> np.ndarray:
        return self.many(np.asarray(state.xis)[None])[0]


def h_rao_blackwell(state: AugmentedState, model: ModelSpec, proposal: ProposalSpec, x) -> np.ndarray:
    """``sum_k w_k grad_theta log p(x, z_k)`` over the K slots of ``state``."""
    return WeightedStatistic(model, proposal, x)(state)


# ---------------------------------------------------------------------------
# lagged estimator


def _reduce(ha: np.ndarray, hb: np.ndarray, L: int) -> np.ndarray:
    """Lagged sum from ``ha = h(A_t), t = t0..`` and ``hb = h(B_s), s = t0..``.

    The first ``L`` rows of ``ha`` form the plain average and row ``L + j``
    is paired with ``hb[j]``.  Everything is centred on ``ha[0]`` so that a
    constant ``h`` is reproduced exactly.
    """
    anchor = ha[0]
    acc = np.zeros_like(anchor)
    for i in range(1, L):
        acc += ha[i] - anchor
    for j in range(hb.shape[0]):
        acc += ha[L + j] - hb[j]
    return anchor + acc / L


def _ranges(traj: CoupledTrajectory, capped_policy: str) -> tuple[int, int, int]:
    """Index ranges ``(a_stop, b_stop, tau)`` used by the estimator.

    Chain A is read at ``t0..a_stop-1`` and chain B at ``t0..b_stop-1``.
    """
    if traj.capped:
        if capped_policy == "error":
            raise CappedRunError(
                f"coupled run reached t={traj.T} without meeting; raise max_iterations"
                " or accept the truncated estimate"
            )
        if capped_policy != "accept":
            raise ValueError(f"unknown capped policy {capped_policy!r}")
    tau = traj.effective_tau
    t0, L = traj.t0, traj.L
    if traj.T < t0 + L - 1:
        raise ValueError("trajectory is shorter than t0 + L - 1")
    a_stop = max(tau, t0 + L)
    b_stop = max(tau - L, t0)
    return a_stop, b_stop, tau


def unbiased_estimate(traj: CoupledTrajectory, h, capped_policy: str = "error") -> np.ndarray:
    """Lagged coupled estimator of ``E[h]`` under the stationary law.

    ``(1/L) [sum_{t0}^{t0+L-1} h(A_t) + sum_{t0+L}^{tau-1} (h(A_t) - h(B_{t-L}))]``.

    Args:
        traj: output of :func:`~disir.coupling.run_coupled_chains`.
        h: a :class:`WeightedStatistic` (batched fast path) or any callable
            mapping an :class:`AugmentedState` to a vector.
        capped_policy: ``"error"`` or ``"accept"`` for capped trajectories;
            an accepted capped run is truncated at its last time index.
    """
    a_stop, b_stop, _ = _ranges(traj, capped_policy)
    t0 = traj.t0
    if hasattr(h, "many"):
        ha = h.many(traj.history_a[t0:a_stop])
        hb = h.many(traj.history_b[t0:b_stop]) if b_stop > t0 else np.zeros((0, ha.shape[1]))
    else:
        ha = np.array([np.atleast_1d(h(traj.state_a(t))) for t in range(t0, a_stop)], dtype=float)
        hb = np.array([np.atleast_1d(h(traj.state_b(s))) for s in range(t0, b_stop)], dtype=float)
        hb = hb.reshape(-1, ha.shape[1])
    return _reduce(ha, hb, traj.L)


@dataclass(frozen=True)
class SignedMeasure:
    """Signed empirical measure of a coupled run.

    ``atoms`` holds ``(chain, time, state, mass)`` with ``chain`` ``"a"`` or
    ``"b"`` and exact rational masses.
    """

    atoms: list
    L: int

    @property
    def total_mass(self) -> Fraction:
        return sum((m for *_, m in self.atoms), Fraction(0))

    def states(self) -> list[AugmentedState]:
        return [s for _, _, s, _ in self.atoms]

    def masses(self) -> list[Fraction]:
        return [m for *_, m in self.atoms]

    def integrate(self, h) -> np.ndarray:
        """``sum_i m_i h(state_i)``, evaluated in the same order as :func:`unbiased_estimate`."""
        pos = [s for c, _, s, m in self.atoms if c == "a"]
        neg = [s for c, _, s, m in self.atoms if c == "b"]
        if hasattr(h, "many"):
            ha = h.many(np.stack([s.xis for s in pos]))
            hb = h.many(np.stack([s.xis for s in neg])) if neg else np.zeros((0, ha.shape[1]))
        else:
            ha = np.array([np.atleast_1d(h(s)) for s in pos], dtype=float)
            hb = np.array([np.atleast_1d(h(s)) for s in neg], dtype=float).reshape(-1, ha.shape[1])
        return _reduce(ha, hb, self.L)


def signed_measure(traj: CoupledTrajectory, capped_policy: str = "error") -> SignedMeasure:
    """Atoms with mass ``+1/L`` on ``A_t`` and ``-1/L`` on ``B_{t-L}`` for the correction terms."""
    a_stop, b_stop, _ = _ranges(traj, capped_policy)
    unit = Fraction(1, traj.L)
    atoms = [("a", t, traj.state_a(t), unit) for t in range(traj.t0, a_stop)]
    atoms += [("b", s, traj.state_b(s), -unit) for s in range(traj.t0, b_stop)]
    return SignedMeasure(atoms, traj.L)


def unbiased_expectation(
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    config: EstimatorConfig,
    rng: np.random.Generator,
    stat: Optional[Callable] = None,
) -> tuple[np.ndarray, CoupledTrajectory]:
    """One coupled run and the lagged estimate of ``E[sum_k w_k stat(z_k)]``."""
    traj = run_coupled_chains(model, proposal, x, config, rng)
    h = WeightedStatistic(model, proposal, x, stat)
    return unbiased_estimate(traj, h, config.capped_policy), traj


def _as_batch(x_batch, dim: Optional[int] = None) -> np.ndarray:
    xb = np.asarray(x_batch, dtype=float)
    if xb.ndim == 1:
        xb = xb[None, :]
    if xb.ndim != 2 or xb.shape[0] == 0:
        raise ValueError("x_batch must be a non-empty (N, Dx) array")
    return xb


def unbiased_gradient(
    model: ModelSpec,
    proposal: ProposalSpec,
    x_batch,
    config: EstimatorConfig,
    rng: np.random.Generator,
    betas=None,
) -> GradientEstimate:
    """Unbiased estimate of ``sum_n grad_theta log p_theta(x_n)``.

    Each datapoint gets its own coupled run on a child stream of ``rng``
    (``rng.spawn``), and the per-datapoint estimates are summed.

    Args:
        betas: optional per-datapoint starting correlation strengths that
            replace ``config.beta_init``.
    """
    xb = _as_batch(x_batch)
    n_data = xb.shape[0]
    if betas is not None:
        betas = np.asarray(betas, dtype=float)
        if betas.shape != (n_data,):
            raise ValueError("betas must have one entry per datapoint")
    children = rng.spawn(n_data)
    total = np.zeros(model.theta.size)
    taus = np.empty(n_data, dtype=np.int64)
    ess_out = np.empty(n_data)
    work = 0
    capped = False
    max_lw = -np.inf
    for n, (x, child) in enumerate(zip(xb, children)):
        cfg = config if betas is None else replace(config, beta_init=float(betas[n]))
        est, traj = unbiased_expectation(model, proposal, x, cfg, child)
        total += est
        taus[n] = traj.tau
        ess_out[n] = traj.mean_ess
        work += traj.work
        capped |= traj.capped
        max_lw = max(max_lw, traj.max_log_weight)
    tau = -1 if capped else int(taus.max())
    return GradientEstimate(total, tau, capped, work, taus, ess_out, float(max_lw))


def calibrate_beta(
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    K: int,
    rng: np.random.Generator,
    steps: int = 200,
    controller: Optional[BetaController] = None,
) -> float:
    """Correlation strength found by the ESS rule on an adaptive single chain.

    Runs ``steps`` composed steps and averages beta over the second half,
    which smooths the random-walk fluctuation of the update.
    """
    ctrl = controller if controller is not None else BetaController()
    state = AugmentedState.initial(K, model.latent_dim, rng)
    _, _, betas = run_chain(state, model, proposal, x, steps, rng, replace(ctrl, frozen=False))
    return float(np.mean(betas[steps // 2 :]))


# ---------------------------------------------------------------------------
# biased baselines


def _iwae_parts(model, proposal, x, xis):
    zs = proposal.reparam(proposal.phi, xis, x)
    lw = model.log_joint(model.theta, x, zs) - proposal.log_density(proposal.phi, x, zs)
    bad = np.flatnonzero(~np.isfinite(lw))
    if bad.size:
        raise SupportError(f"non-finite log-weight at slot {int(bad[0])}")
    p, log_sum = _normalize(lw)
    return zs, lw, p, float(log_sum)


def iwae_gradient_theta(model: ModelSpec, proposal: ProposalSpec, x, K: int, rng: np.random.Generator) -> np.ndarray:
    """Self-normalised IS estimate ``sum_k w_k grad_theta log p(x, z_k)`` from K fresh draws."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x = _as_x(x)
    xis = rng.standard_normal((K, model.latent_dim))
    return WeightedStatistic(model, proposal, x).many(xis[None])[0]


def elbo_gradient_theta(model: ModelSpec, proposal: ProposalSpec, x, rng: np.random.Generator) -> np.ndarray:
    """``grad_theta log p(x, z)`` at a single proposal draw."""
    return iwae_gradient_theta(model, proposal, x, 1, rng)


def iwae_bound_estimate(
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    K: int,
    rng: Optional[np.random.Generator] = None,
    xis: Optional[np.ndarray] = None,
) -> float:
    """One draw of ``log((1/K) sum_k w_k)``; pass ``xis`` for common random numbers."""
    x = _as_x(x)
    if xis is None:
        xis = rng.standard_normal((K, model.latent_dim))
    _, lw, _, log_sum = _iwae_parts(model, proposal, x, np.ascontiguousarray(xis, dtype=float))
    return log_sum - np.log(lw.size)


def iwae_phi_gradient(
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    K: int,
    rng: Optional[np.random.Generator] = None,
    xis: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Pathwise gradient of the IWAE bound in ``phi`` with the base noise held fixed.

    ``d/dphi log w_k = (grad_z log p - grad_z log q) . dg/dphi - d_phi log q``,
    averaged with the normalised weights.

    Raises:
        NotImplementedError: the proposal or model lacks the derivative hooks.
    """
    if proposal.phi.size == 0:
        return np.zeros(0)
    if proposal.hooks is None or model.grad_z_log_joint is None:
        raise NotImplementedError("phi gradient needs proposal hooks and model.grad_z_log_joint")
    x = _as_x(x)
    if xis is None:
        xis = rng.standard_normal((K, model.latent_dim))
    xis = np.ascontiguousarray(xis, dtype=float)
    zs, _, p, _ = _iwae_parts(model, proposal, x, xis)
    hooks = proposal.hooks
    v = model.grad_z_log_joint(model.theta, x, zs) - hooks.grad_z_log_density(proposal.phi, x, zs)
    per = hooks.reparam_vjp(proposal.phi, xis, x, v) - hooks.score(proposal.phi, x, zs)
    return p @ per


# ---------------------------------------------------------------------------
# optimiser


def rmsprop_update(params, grad, state, lr: float, decay: float = 0.9, eps: float = 1e-8):
    """One RMSProp ascent step; returns new ``(params, state)`` without mutating inputs."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    state = np.asarray(state, dtype=float)
    if not params.shape == grad.shape == state.shape:
        raise ValueError(f"shape mismatch: {params.shape}, {grad.shape}, {state.shape}")
    state = decay * state + (1.0 - decay) * grad * grad
    return params + lr * grad / np.sqrt(state + eps), state


# ---------------------------------------------------------------------------
# long single chains


@numba.njit
def _run_chain(xis, ell, n_steps, beta, adapt, exploit, step, target, lo, hi,
               theta, phi, x, log_joint, log_density, reparam, stat, rng):
    """Long composed chain; returns the per-step weighted statistic and betas."""
    K = xis.shape[0]
    out = np.empty((0, 0))
    betas = np.empty(n_steps)
    for t in range(n_steps):
        xis, ell, _, _, p = _disir_core(xis, ell, 0.0, theta, phi, x, log_joint, log_density, reparam, rng)
        if exploit:
            xis, ell, _, _, p = _disir_core(xis, ell, beta, theta, phi, x, log_joint, log_density, reparam, rng)
            if adapt:
                beta = _update_beta(beta, 1.0 / np.dot(p, p), K, step, target, lo, hi)
        zs = reparam(phi, xis, x)
        g = stat(theta, x, zs)
        if t == 0:
            out = np.zeros((n_steps, g.shape[1]))
        for k in range(K):
            for j in range(g.shape[1]):
                out[t, j] += p[k] * g[k, j]
        betas[t] = beta
    return out, xis, ell, betas


def run_chain(
    state: AugmentedState,
    model: ModelSpec,
    proposal: ProposalSpec,
    x,
    n_steps: int,
    rng: np.random.Generator,
    controller: Optional[BetaController] = None,
    exploit: bool = True,
    stat: Optional[Callable] = None,
) -> tuple[np.ndarray, AugmentedState, np.ndarray]:
    """Run ``n_steps`` composed steps and record ``sum_k w_k stat(z_k)`` after each.

    Returns:
        ``(values (n_steps, P), final state, betas (n_steps,))``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    ctrl = controller if controller is not None else BetaController()
    stat = model.grad_theta_log_joint if stat is None else stat
    vals, xis, ell, betas = _run_chain(
        np.array(state.xis), state.ell, int(n_steps), ctrl.beta, not ctrl.frozen, exploit,
        ctrl.step_size, ctrl.target_fraction, ctrl.clamp_lo, ctrl.clamp_hi,
        model.theta, proposal.phi, _as_x(x),
        model.log_joint, proposal.log_density, proposal.reparam, stat, rng,
    )
    return vals, AugmentedState(xis, int(ell)), betas


def fit_proposal(
    model: ModelSpec,
    proposal: ProposalSpec,
    X,
    K: int,
    steps: int,
    rng: np.random.Generator,
    lr: float = 0.01,
    batch_size: int = 32,
    decay: float = 0.9,
) -> tuple[ProposalSpec, np.ndarray]:
    """Maximise the IWAE bound in ``phi`` by RMSProp on minibatches of ``X``.

    Returns:
        The fitted proposal and the minibatch-mean bound estimate per step.
    """
    X = _as_batch(X)
    phi = proposal.phi.copy()
    state = np.zeros_like(phi)
    trace = np.empty(steps)
    for it in range(steps):
        idx = rng.integers(0, X.shape[0], size=min(batch_size, X.shape[0]))
        cur = proposal.with_phi(phi)
        g = np.zeros_like(phi)
        bound = 0.0
        for i in idx:
            xis = rng.standard_normal((K, model.latent_dim))
            g += iwae_phi_gradient(model, cur, X[i], K, xis=xis)
            bound += iwae_bound_estimate(model, cur, X[i], K, xis=xis)
        g /= idx.size
        trace[it] = bound / idx.size
        phi, state = rmsprop_update(phi, g, state, lr, decay)
    return proposal.with_phi(phi), trace
