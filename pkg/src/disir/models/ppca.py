"""Probabilistic PCA with closed-form oracles, and the linear-Gaussian proposal.

The model is ``z ~ N(0, I_Dz)``, ``x | z ~ N(theta0 + theta1^T z, 0.1 I_Dx)``
with ``theta = (theta0, vec(theta1))`` flattened row-major.  The proposal is a
fully factorised Gaussian whose mean is linear in ``x``::

    g_phi(xi, x) = W x + b + exp(log_s) * xi,   phi = (vec(W), b, log_s)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import linalg

from ..core import AugmentedState, ModelSpec, ParamLayout, PhiGradientHooks, ProposalSpec

SIGMA2 = 0.1
_LOG2PI = math.log(2.0 * math.pi)

__all__ = [
    "SIGMA2",
    "PpcaModel",
    "LinearGaussianProposal",
    "ppca_log_joint",
    "ppca_grad_theta",
    "ppca_grad_z",
    "ppca_log_marginal",
    "ppca_exact_marginal_grad",
    "ppca_exact_posterior",
    "ppca_ml_solution",
    "sample_augmented_target",
    "identity_statistic",
]


# ---------------------------------------------------------------------------
# compiled densities


@numba.njit(cache=True)
def ppca_log_joint(theta, x, zs):
    Dx = x.size
    K, Dz = zs.shape
    th0 = theta[:Dx]
    th1 = theta[Dx : Dx + Dz * Dx].reshape((Dz, Dx))
    out = np.empty(K)
    c = -0.5 * Dz * np.log(2.0 * np.pi) - 0.5 * Dx * np.log(2.0 * np.pi * SIGMA2)
    for k in range(K):
        r = x - th0 - zs[k] @ th1
        out[k] = c - 0.5 * np.dot(zs[k], zs[k]) - 0.5 * np.dot(r, r) / SIGMA2
    return out


@numba.njit(cache=True)
def ppca_grad_theta(theta, x, zs):
    """Per-sample gradient of the log joint in ``theta``, shape ``(K, Dx + Dz*Dx)``."""
    Dx = x.size
    K, Dz = zs.shape
    th0 = theta[:Dx]
    th1 = theta[Dx : Dx + Dz * Dx].reshape((Dz, Dx))
    out = np.empty((K, Dx + Dz * Dx))
    for k in range(K):
        r = (x - th0 - zs[k] @ th1) / SIGMA2
        out[k, :Dx] = r
        for i in range(Dz):
            out[k, Dx + i * Dx : Dx + (i + 1) * Dx] = zs[k, i] * r
    return out


@numba.njit(cache=True)
def ppca_grad_z(theta, x, zs):
    Dx = x.size
    K, Dz = zs.shape
    th0 = theta[:Dx]
    th1 = theta[Dx : Dx + Dz * Dx].reshape((Dz, Dx))
    out = np.empty((K, Dz))
    for k in range(K):
        r = (x - th0 - zs[k] @ th1) / SIGMA2
        out[k] = th1 @ r - zs[k]
    return out


@numba.njit(cache=True)
def identity_statistic(theta, x, zs):
    """``h(z) = z``; pairs with the weighted-statistic machinery for posterior means."""
    return zs.copy()


@numba.njit(cache=True)
def _lg_unpack(phi, x, Dz):
    Dx = x.size
    W = phi[: Dz * Dx].reshape((Dz, Dx))
    b = phi[Dz * Dx : Dz * Dx + Dz]
    log_s = phi[Dz * Dx + Dz : Dz * Dx + 2 * Dz]
    return W @ x + b, np.exp(log_s), log_s


@numba.njit(cache=True)
def lg_reparam(phi, xis, x):
    K, Dz = xis.shape
    mu, s, _ = _lg_unpack(phi, x, Dz)
    out = np.empty((K, Dz))
    for k in range(K):
        out[k] = mu + s * xis[k]
    return out


@numba.njit(cache=True)
def lg_log_density(phi, x, zs):
    K, Dz = zs.shape
    mu, s, log_s = _lg_unpack(phi, x, Dz)
    c = -0.5 * Dz * np.log(2.0 * np.pi) - log_s.sum()
    out = np.empty(K)
    for k in range(K):
        e = (zs[k] - mu) / s
        out[k] = c - 0.5 * np.dot(e, e)
    return out


# ---------------------------------------------------------------------------
# plain numpy hooks of the proposal


def _lg_parts(phi, x, Dz):
    Dx = x.size
    W = phi[: Dz * Dx].reshape(Dz, Dx)
    b = phi[Dz * Dx : Dz * Dx + Dz]
    log_s = phi[Dz * Dx + Dz :]
    return W @ x + b, np.exp(log_s)


def _lg_dz(phi, x):
    return phi.size // (x.size + 2)


def lg_sample(phi, x, n, rng):
    Dz = _lg_dz(phi, x)
    mu, s = _lg_parts(phi, x, Dz)
    return mu + s * rng.standard_normal((n, Dz))


def lg_inverse(phi, zs, x):
    mu, s = _lg_parts(phi, x, zs.shape[1])
    return (zs - mu) / s


def lg_grad_z_log_density(phi, x, zs):
    mu, s = _lg_parts(phi, x, zs.shape[1])
    return -(zs - mu) / s**2


def lg_reparam_vjp(phi, xis, x, v):
    K, Dz = xis.shape
    _, s = _lg_parts(phi, x, Dz)
    return np.concatenate(
        [(v[:, :, None] * x[None, None, :]).reshape(K, -1), v, v * s * xis], axis=1
    )


def lg_score(phi, x, zs):
    K, Dz = zs.shape
    mu, s = _lg_parts(phi, x, Dz)
    e = (zs - mu) / s
    d_mu = e / s
    return np.concatenate(
        [(d_mu[:, :, None] * x[None, None, :]).reshape(K, -1), d_mu, e**2 - 1.0], axis=1
    )


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class PpcaModel:
    theta0: np.ndarray
    theta1: np.ndarray
    sigma2: float = SIGMA2

    def __post_init__(self):
        th0 = np.asarray(self.theta0, dtype=float).ravel()
        th1 = np.atleast_2d(np.asarray(self.theta1, dtype=float))
        if self.sigma2 != SIGMA2:
            raise ValueError(f"sigma2 is fixed at {SIGMA2}")
        if th1.shape[1] != th0.size:
            raise ValueError(f"theta1 must be (Dz, {th0.size}), got {th1.shape}")
        object.__setattr__(self, "theta0", th0)
        object.__setattr__(self, "theta1", th1)

    @property
    def Dz(self) -> int:
        return self.theta1.shape[0]

    @property
    def Dx(self) -> int:
        return self.theta0.size

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout([("theta0", (self.Dx,)), ("theta1", (self.Dz, self.Dx))])

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.theta0, self.theta1.ravel()])

    @classmethod
    def from_theta(cls, theta, Dz: int, Dx: int) -> "PpcaModel":
        theta = np.asarray(theta, dtype=float)
        if theta.size != Dx + Dz * Dx:
            raise ValueError("theta has the wrong length")
        return cls(theta[:Dx], theta[Dx:].reshape(Dz, Dx))

    @classmethod
    def random(cls, Dz: int, Dx: int, rng: np.random.Generator) -> "PpcaModel":
        """``theta1`` entries i.i.d. ``N(0, 1/Dz)``, ``theta0 = 0``."""
        return cls(np.zeros(Dx), rng.normal(0.0, 1.0 / math.sqrt(Dz), size=(Dz, Dx)))

    def spec(self) -> ModelSpec:
        return ModelSpec(
            self.theta, ppca_log_joint, ppca_grad_theta, self.Dz,
            layout=self.layout, grad_z_log_joint=ppca_grad_z, name="ppca",
        )

    def marginal_cov(self) -> np.ndarray:
        return self.theta1.T @ self.theta1 + self.sigma2 * np.eye(self.Dx)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` observations, shape ``(n, Dx)``."""
        z = rng.standard_normal((n, self.Dz))
        return self.theta0 + z @ self.theta1 + math.sqrt(self.sigma2) * rng.standard_normal((n, self.Dx))


@dataclass(frozen=True)
class LinearGaussianProposal:
    W: np.ndarray
    b: np.ndarray
    log_s: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        log_s = np.asarray(self.log_s, dtype=float).ravel()
        if not (W.shape[0] == b.size == log_s.size):
            raise ValueError("W, b and log_s disagree on Dz")
        if not np.all(np.isfinite(log_s)):
            raise ValueError("log_s must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "log_s", log_s)

    @property
    def Dz(self) -> int:
        return self.W.shape[0]

    @property
    def Dx(self) -> int:
        return self.W.shape[1]

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout([("W", (self.Dz, self.Dx)), ("b", (self.Dz,)), ("log_s", (self.Dz,))])

    @property
    def phi(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b, self.log_s])

    @classmethod
    def from_phi(cls, phi, Dz: int, Dx: int) -> "LinearGaussianProposal":
        phi = np.asarray(phi, dtype=float)
        if phi.size != Dz * Dx + 2 * Dz:
            raise ValueError("phi has the wrong length")
        return cls(phi[: Dz * Dx].reshape(Dz, Dx), phi[Dz * Dx : Dz * Dx + Dz], phi[Dz * Dx + Dz :])

    @classmethod
    def standard(cls, Dz: int, Dx: int) -> "LinearGaussianProposal":
        """``N(0, I)`` regardless of ``x``."""
        return cls(np.zeros((Dz, Dx)), np.zeros(Dz), np.zeros(Dz))

    @classmethod
    def matched(cls, model: PpcaModel) -> "LinearGaussianProposal":
        """Factorised proposal with the exact posterior mean map and marginal variances.

        Equals the exact posterior when ``theta1`` has orthogonal rows.
        """
        cov = np.linalg.inv(_posterior_precision(model))
        M = cov @ model.theta1 / model.sigma2
        return cls(M, -M @ model.theta0, 0.5 * np.log(np.diag(cov)))

    def mean(self, x) -> np.ndarray:
        return self.W @ np.asarray(x, dtype=float) + self.b

    def spec(self) -> ProposalSpec:
        return ProposalSpec(
            self.phi, lg_log_density, lg_reparam,
            sample=lg_sample, inverse=lg_inverse,
            hooks=PhiGradientHooks(lg_grad_z_log_density, lg_reparam_vjp, lg_score),
            layout=self.layout, name="linear-gaussian",
        )


# ---------------------------------------------------------------------------
# closed-form oracles


def _posterior_precision(m: PpcaModel) -> np.ndarray:
    return np.eye(m.Dz) + m.theta1 @ m.theta1.T / m.sigma2


def _as_batch(x, Dx):
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != Dx:
        raise ValueError(f"observations must have {Dx} coordinates")
    return X


def ppca_log_marginal(m: PpcaModel, x) -> float:
    """``sum_n log N(x_n; theta0, theta1^T theta1 + sigma2 I)``."""
    X = _as_batch(x, m.Dx)
    C = m.marginal_cov()
    cf = linalg.cho_factor(C, lower=True)
    R = X - m.theta0
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    quad = np.sum(R * linalg.cho_solve(cf, R.T).T)
    return float(-0.5 * (X.shape[0] * (m.Dx * _LOG2PI + logdet) + quad))


def ppca_exact_marginal_grad(m: PpcaModel, x) -> np.ndarray:
    """Gradient of :func:`ppca_log_marginal` in ``(theta0, vec(theta1))``.

    For a batch the per-datapoint gradients are summed.

    Raises:
        numpy.linalg.LinAlgError: the marginal covariance is singular.
    """
    X = _as_batch(x, m.Dx)
    C = m.marginal_cov()
    Cinv = np.linalg.inv(C)
    if not np.all(np.isfinite(Cinv)):
        raise np.linalg.LinAlgError("marginal covariance is singular")
    A = (X - m.theta0) @ Cinv  # rows are C^{-1}(x_n - theta0)
    g0 = A.sum(axis=0)
    G = A.T @ A - X.shape[0] * Cinv
    g1 = m.theta1 @ G
    return np.concatenate([g0, g1.ravel()])


def ppca_exact_posterior(m: PpcaModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of ``z`` given one observation."""
    x = np.asarray(x, dtype=float)
    if x.shape != (m.Dx,):
        raise ValueError(f"x must have shape ({m.Dx},)")
    cov = np.linalg.inv(_posterior_precision(m))
    cov = 0.5 * (cov + cov.T)
    mean = cov @ m.theta1 @ (x - m.theta0) / m.sigma2
    return mean, cov


def ppca_ml_solution(X, Dz: int) -> PpcaModel:
    """Maximum-likelihood PPCA parameters with the noise variance held at 0.1.

    ``theta0`` is the sample mean and ``theta1^T = U (Lambda - sigma2)_+^{1/2}``
    over the top ``Dz`` eigenpairs of the (biased) sample covariance.
    """
    X = np.asarray(X, dtype=float)
    N, Dx = X.shape
    if Dz > Dx:
        raise ValueError("Dz must not exceed Dx")
    mu = X.mean(axis=0)
    S = (X - mu).T @ (X - mu) / N
    lam, U = np.linalg.eigh(S)
    order = np.argsort(lam)[::-1][:Dz]
    lam, U = lam[order], U[:, order]
    scale = np.sqrt(np.maximum(lam - SIGMA2, 0.0))
    return PpcaModel(mu, (U * scale).T)


def sample_augmented_target(
    model: PpcaModel,
    proposal: LinearGaussianProposal,
    x,
    K: int,
    beta: float,
    rng: np.random.Generator,
) -> AugmentedState:
    """Exact draw from the DISIR augmented target.

    ``ell`` is uniform, the selected noise is the inverse map of an exact
    posterior draw, and the remaining slots follow the autoregressive kernel
    outward from ``ell``.
    """
    x = np.asarray(x, dtype=float)
    mean, cov = ppca_exact_posterior(model, x)
    z = rng.multivariate_normal(mean, cov, method="cholesky")
    ell = int(rng.integers(0, K))
    xis = np.empty((K, model.Dz))
    xis[ell] = (z - proposal.mean(x)) / np.exp(proposal.log_s)
    c = math.sqrt(1.0 - beta * beta)
    for k in range(ell + 1, K):
        xis[k] = beta * xis[k - 1] + c * rng.standard_normal(model.Dz)
    for k in range(ell - 1, -1, -1):
        xis[k] = beta * xis[k + 1] + c * rng.standard_normal(model.Dz)
    return AugmentedState(xis, ell)
