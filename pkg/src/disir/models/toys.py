"""Toy targets: a two-atom discrete target for exact enumeration, and a 1-D bimodal mixture."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numba
import numpy as np
from scipy import special, stats

from ..core import AugmentedState, ModelSpec, ProposalSpec
from ..kernels import BetaController, composed_step, selected_latent
from .ppca import LinearGaussianProposal

__all__ = [
    "DiscreteToyTarget",
    "TransitionLaw",
    "enumerate_transition_law",
    "BimodalToy1D",
    "toy_trace",
    "TOY_KERNELS",
]


# ---------------------------------------------------------------------------
# two-atom target
#
# Atoms are the latent values 0.0 and 1.0.  The model's ``theta`` holds the
# log target probabilities and the proposal's ``phi`` the log proposal
# probabilities; the reparameterisation maps xi to atom 0 iff Phi(xi) < q0.


@numba.njit(cache=True)
def _atom(z):
    return 0 if z < 0.5 else 1


@numba.njit(cache=True)
def _discrete_log_joint(theta, x, zs):
    out = np.empty(zs.shape[0])
    for k in range(zs.shape[0]):
        out[k] = theta[_atom(zs[k, 0])]
    return out


@numba.njit(cache=True)
def _discrete_grad_theta(theta, x, zs):
    out = np.zeros((zs.shape[0], 2))
    for k in range(zs.shape[0]):
        out[k, _atom(zs[k, 0])] = 1.0
    return out


@numba.njit(cache=True)
def _discrete_reparam(phi, xis, x):
    q0 = np.exp(phi[0])
    out = np.empty((xis.shape[0], 1))
    for k in range(xis.shape[0]):
        cdf = 0.5 * math.erfc(-xis[k, 0] / math.sqrt(2.0))
        out[k, 0] = 0.0 if cdf < q0 else 1.0
    return out


@numba.njit(cache=True)
def _discrete_log_density(phi, x, zs):
    out = np.empty(zs.shape[0])
    for k in range(zs.shape[0]):
        out[k] = phi[_atom(zs[k, 0])]
    return out


def _discrete_sample(phi, x, n, rng):
    return (rng.random((n, 1)) >= math.exp(phi[0])).astype(float)


def _as_prob_pair(p) -> tuple[Fraction, Fraction]:
    a, b = (Fraction(v) for v in p)
    if a <= 0 or b <= 0:
        raise ValueError("atom probabilities must be positive")
    s = a + b
    return a / s, b / s


@dataclass(frozen=True)
class DiscreteToyTarget:
    """Target and proposal probabilities over the atoms ``{0, 1}``."""

    target: tuple = (0.8, 0.2)
    proposal: tuple = (0.5, 0.5)

    def __post_init__(self):
        for name in ("target", "proposal"):
            p = tuple(getattr(self, name))
            if len(p) != 2 or min(p) <= 0 or max(p) >= 1 or abs(float(sum(p)) - 1.0) > 1e-12:
                raise ValueError(f"{name} must be two probabilities in (0, 1) summing to 1")
            object.__setattr__(self, name, p)

    def model_spec(self) -> ModelSpec:
        theta = np.log(np.asarray(self.target, dtype=float))
        return ModelSpec(theta, _discrete_log_joint, _discrete_grad_theta, 1, name="two-atom")

    def proposal_spec(self) -> ProposalSpec:
        phi = np.log(np.asarray(self.proposal, dtype=float))
        return ProposalSpec(
            phi, _discrete_log_density, _discrete_reparam, sample=_discrete_sample, name="two-atom"
        )


@dataclass(frozen=True)
class TransitionLaw:
    """Transition matrix over augmented states ``(atoms, ell)``."""

    states: list
    matrix: np.ndarray
    exact: list | None = field(default=None, repr=False)

    def index(self, atoms, ell) -> int:
        return self.states.index((tuple(atoms), ell))

    def selected_atom_matrix(self) -> np.ndarray:
        """2x2 law of the selected atom ``z_ell``.

        The selected-atom process is Markov on its own; rows are read off the
        first augmented state carrying each selected atom.
        """
        out = np.zeros((2, 2))
        for a in (0, 1):
            i = next(i for i, (atoms, ell) in enumerate(self.states) if atoms[ell] == a)
            for j, (atoms, ell) in enumerate(self.states):
                out[a, atoms[ell]] += self.matrix[i, j]
        return out


TOY_KERNELS = ("isir", "disir0")


def enumerate_transition_law(t: DiscreteToyTarget, kernel: str, K: int) -> TransitionLaw:
    """Exact one-step law of ISIR on the two-atom target.

    ``kernel="isir"`` enumerates the z-space kernel with exact rational
    arithmetic.  ``kernel="disir0"`` enumerates the beta=0 DISIR kernel in
    noise space: a fresh slot lands on atom 0 with the Gaussian mass of the
    preimage ``{xi : Phi(xi) < q0}``.
    """
    if kernel not in TOY_KERNELS:
        raise ValueError(f"unsupported kernel {kernel!r}; choose from {TOY_KERNELS}")
    if not 2 <= K <= 4:
        raise ValueError("enumeration supports 2 <= K <= 4")

    if kernel == "isir":
        p = _as_prob_pair(t.target)
        q = _as_prob_pair(t.proposal)
        fresh = q
        weight = (p[0] / q[0], p[1] / q[1])
        one = Fraction(1)
    else:
        p = tuple(float(v) for v in t.target)
        q = tuple(float(v) for v in t.proposal)
        threshold = special.ndtri(q[0])
        m0 = float(special.ndtr(threshold))
        fresh = (m0, 1.0 - m0)
        weight = (p[0] / q[0], p[1] / q[1])
        one = 1.0

    states = [(atoms, ell) for atoms in itertools.product((0, 1), repeat=K) for ell in range(K)]
    index = {s: i for i, s in enumerate(states)}
    n = len(states)
    exact = [[0 * one for _ in range(n)] for _ in range(n)]
    for i, (atoms, ell) in enumerate(states):
        for laux in range(K):
            others = [k for k in range(K) if k != laux]
            for draw in itertools.product((0, 1), repeat=K - 1):
                new = [0] * K
                new[laux] = atoms[ell]
                prob = one / K
                for k, a in zip(others, draw):
                    new[k] = a
                    prob = prob * fresh[a]
                w = [weight[a] for a in new]
                total = sum(w)
                new_t = tuple(new)
                for ell_star in range(K):
                    exact[i][index[(new_t, ell_star)]] += prob * w[ell_star] / total
    matrix = np.array([[float(v) for v in row] for row in exact])
    return TransitionLaw(states, matrix, exact if kernel == "isir" else None)


# ---------------------------------------------------------------------------
# 1-D bimodal mixture


@numba.njit(cache=True)
def _mixture_terms(theta, z):
    w = theta[0:2]
    m = theta[2:4]
    s = theta[4:6]
    e = (z - m) / s
    return np.log(w) - 0.5 * e * e - np.log(s) - 0.5 * np.log(2.0 * np.pi), e


@numba.njit(cache=True)
def _mixture_log_joint(theta, x, zs):
    out = np.empty(zs.shape[0])
    for k in range(zs.shape[0]):
        t, _ = _mixture_terms(theta, zs[k, 0])
        mx = max(t[0], t[1])
        out[k] = mx + np.log(np.exp(t[0] - mx) + np.exp(t[1] - mx))
    return out


@numba.njit(cache=True)
def _mixture_grad_theta(theta, x, zs):
    """Gradient in (weights, means, stddevs), weights treated as free parameters."""
    out = np.empty((zs.shape[0], 6))
    for k in range(zs.shape[0]):
        t, e = _mixture_terms(theta, zs[k, 0])
        mx = max(t[0], t[1])
        r = np.exp(t - mx)
        r /= r.sum()
        s = theta[4:6]
        out[k, 0:2] = r / theta[0:2]
        out[k, 2:4] = r * e / s
        out[k, 4:6] = r * (e * e - 1.0) / s
    return out


@dataclass(frozen=True)
class BimodalToy1D:
    """Two-component Gaussian mixture target with a ``N(0, 1)`` proposal."""

    weights: tuple = (0.5, 0.5)
    means: tuple = (-2.0, 2.0)
    stddevs: tuple = (0.5, 0.5)

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-12 or min(self.weights) <= 0:
            raise ValueError("mixture weights must be positive and sum to 1")
        if min(self.stddevs) <= 0:
            raise ValueError("stddevs must be positive")

    @property
    def theta(self) -> np.ndarray:
        return np.array([*self.weights, *self.means, *self.stddevs], dtype=float)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.theta, _mixture_log_joint, _mixture_grad_theta, 1, name="bimodal")

    def proposal_spec(self) -> ProposalSpec:
        return LinearGaussianProposal.standard(1, 1).spec()

    @property
    def x(self) -> np.ndarray:
        return np.zeros(1)

    def cdf(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return sum(w * stats.norm.cdf(z, m, s) for w, m, s in zip(self.weights, self.means, self.stddevs))


def toy_trace(
    t: BimodalToy1D,
    kernel: str,
    steps: int,
    rng: np.random.Generator,
    K: int = 5,
    beta_init: float = 0.5,
) -> list[tuple[int, float, float, float]]:
    """Selected-sample trace ``(t, z, beta, ess)`` of a chain on the bimodal target.

    ``kernel`` is ``"isir"`` (beta=0 steps only) or ``"isir-disir"`` (the
    composed kernel with adaptive beta).  ``beta`` is the value used by the
    step and ``ess`` the ESS of the step's last resampling.
    """
    if kernel not in ("isir", "isir-disir"):
        raise ValueError(f"unknown toy kernel {kernel!r}")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    model, proposal, x = t.model_spec(), t.proposal_spec(), t.x
    exploit = kernel == "isir-disir"
    ctrl = BetaController(beta=beta_init if exploit else 0.0)
    state = AugmentedState.initial(K, 1, rng)
    rows = []
    for step in range(1, steps + 1):
        beta_used = ctrl.beta if exploit else 0.0
        state, ctrl, diag = composed_step(state, ctrl, model, proposal, x, rng, exploit=exploit)
        rows.append((step, float(selected_latent(state, proposal, x)[0]), beta_used, diag.ess_last))
    return rows
