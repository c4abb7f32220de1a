"""Model/proposal abstractions, importance-weight arithmetic and random streams.

Models and proposals are bundles of numba-compiled functions operating on
flat parameter vectors.  Every density function is vectorised over a leading
axis of latent points, so a kernel evaluates all ``K`` importance samples of a
state in a single call::

    log_joint(theta, x, zs)          -> (K,)
    grad_theta_log_joint(theta, x, zs) -> (K, len(theta))
    reparam(phi, xis, x)             -> (K, D)
    log_density(phi, x, zs)          -> (K,)

The kernels in :mod:`disir.kernels` and :mod:`disir.coupling` call these from
inside compiled code, so they must be ``numba.njit`` dispatchers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numba
import numpy as np

__all__ = [
    "SupportError",
    "DegenerateWeightsError",
    "ParamLayout",
    "ModelSpec",
    "PhiGradientHooks",
    "ProposalSpec",
    "AugmentedState",
    "WeightVector",
    "log_weight",
    "log_weights",
    "normalize_log_weights",
    "ess",
    "rng_stream",
]


class SupportError(FloatingPointError):
    """A log-weight or gradient evaluated to a non-finite number.

    Raised when the proposal puts mass where the model has none (or the
    reverse), which breaks the importance-sampling kernels.
    """


class DegenerateWeightsError(ValueError):
    """All log-weights are ``-inf``."""


class ParamLayout:
    """Named slices of a flat parameter vector.

    >>> layout = ParamLayout([("theta0", (3,)), ("theta1", (2, 3))])
    >>> layout.size
    9
    """

    def __init__(self, entries: Sequence[tuple[str, tuple[int, ...]]]):
        self._slices: dict[str, tuple[slice, tuple[int, ...]]] = {}
        start = 0
        for name, shape in entries:
            if name in self._slices:
                raise ValueError(f"duplicate parameter name {name!r}")
            shape = tuple(int(s) for s in shape)
            n = int(np.prod(shape, dtype=np.int64))
            self._slices[name] = (slice(start, start + n), shape)
            start += n
        self.size = start

    @property
    def names(self) -> list[str]:
        return list(self._slices)

    def slice(self, name: str) -> slice:
        return self._slices[name][0]

    def shape(self, name: str) -> tuple[int, ...]:
        return self._slices[name][1]

    def unpack(self, vec: np.ndarray, name: str) -> np.ndarray:
        sl, shape = self._slices[name]
        return np.asarray(vec)[sl].reshape(shape)

    def pack(self, **arrays: np.ndarray) -> np.ndarray:
        missing = set(self._slices) - set(arrays)
        extra = set(arrays) - set(self._slices)
        if missing or extra:
            raise ValueError(f"pack: missing={sorted(missing)} unexpected={sorted(extra)}")
        out = np.empty(self.size)
        for name, (sl, shape) in self._slices.items():
            arr = np.asarray(arrays[name], dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            out[sl] = arr.ravel()
        return out

    def labels(self) -> list[str]:
        """Human-readable label per flat coordinate, e.g. ``theta1[0,2]``."""
        out = []
        for name, (_, shape) in self._slices.items():
            for idx in np.ndindex(*shape):
                out.append(f"{name}[{','.join(map(str, idx))}]")
        return out


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Target model ``p_theta(x, z)``.

    ``grad_z_log_joint`` is only needed for fitting the proposal by the
    pathwise IWAE gradient.
    """

    theta: np.ndarray
    log_joint: Callable
    grad_theta_log_joint: Callable
    latent_dim: int
    layout: Optional[ParamLayout] = None
    grad_z_log_joint: Optional[Callable] = None
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "theta", np.ascontiguousarray(self.theta, dtype=float))
        if self.layout is not None and self.layout.size != self.theta.size:
            raise ValueError("theta length does not match its layout")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")

    def with_theta(self, theta: np.ndarray) -> "ModelSpec":
        return ModelSpec(
            theta, self.log_joint, self.grad_theta_log_joint, self.latent_dim,
            self.layout, self.grad_z_log_joint, self.name,
        )


@dataclass(frozen=True)
class PhiGradientHooks:
    """Derivatives of a reparameterised proposal with respect to ``phi``.

    All functions are vectorised over the leading sample axis:

    * ``grad_z_log_density(phi, x, zs) -> (K, D)``
    * ``reparam_vjp(phi, xis, x, v) -> (K, len(phi))``, row ``k`` holding
      ``v[k] @ d g_phi(xis[k], x) / d phi``
    * ``score(phi, x, zs) -> (K, len(phi))``, the partial derivative of
      ``log q_phi(z | x)`` at fixed ``z``
    """

    grad_z_log_density: Callable
    reparam_vjp: Callable
    score: Callable


@dataclass(frozen=True, eq=False)
class ProposalSpec:
    """Reparameterisable proposal ``q_phi(z | x)`` with ``z = g_phi(xi, x)``, ``xi ~ N(0, I)``."""

    phi: np.ndarray
    log_density: Callable
    reparam: Callable
    sample: Optional[Callable] = None
    inverse: Optional[Callable] = None
    hooks: Optional[PhiGradientHooks] = None
    layout: Optional[ParamLayout] = None
    name: str = "proposal"

    def __post_init__(self):
        object.__setattr__(self, "phi", np.ascontiguousarray(self.phi, dtype=float))

    def with_phi(self, phi: np.ndarray) -> "ProposalSpec":
        return ProposalSpec(
            phi, self.log_density, self.reparam, self.sample, self.inverse,
            self.hooks, self.layout, self.name,
        )


@dataclass(frozen=True, eq=False)
class AugmentedState:
    """State ``(xi_1..xi_K, ell)`` of an ISIR/DISIR chain.

    ``ell`` is 0-based here, unlike the usual 1..K notation.
    """

    xis: np.ndarray
    ell: int

    def __post_init__(self):
        xis = np.array(self.xis, dtype=float, copy=True)
        if xis.ndim == 1:
            xis = xis[:, None]
        if xis.ndim != 2 or xis.shape[0] < 2:
            raise ValueError("an augmented state needs K >= 2 noise vectors")
        if not 0 <= int(self.ell) < xis.shape[0]:
            raise ValueError(f"ell={self.ell} out of range for K={xis.shape[0]}")
        if not np.all(np.isfinite(xis)):
            raise ValueError("noise vectors must be finite")
        xis.setflags(write=False)
        object.__setattr__(self, "xis", xis)
        object.__setattr__(self, "ell", int(self.ell))

    @property
    def K(self) -> int:
        return self.xis.shape[0]

    @property
    def dim(self) -> int:
        return self.xis.shape[1]

    @property
    def selected(self) -> np.ndarray:
        return self.xis[self.ell]

    def same_as(self, other: "AugmentedState") -> bool:
        """Bitwise equality of all noise slots and the selected index."""
        return self.ell == other.ell and np.array_equal(self.xis, other.xis)

    @classmethod
    def initial(cls, K: int, dim: int, rng: np.random.Generator) -> "AugmentedState":
        """Draw ``xi_k ~ N(0, I)`` and ``ell`` uniform."""
        xis = rng.standard_normal((K, dim))
        ell = rng.integers(0, K)
        return cls(xis, int(ell))


@dataclass(frozen=True)
class WeightVector:
    log_weights: np.ndarray
    normalized: np.ndarray
    log_sum: float

    @property
    def log_mean(self) -> float:
        """``log((1/K) sum_k w_k)``, the one-sample IWAE bound estimate."""
        return self.log_sum - math.log(self.log_weights.size)


@numba.njit(cache=True)
def _normalize(logw):
    m = -np.inf
    for v in logw:
        if v > m:
            m = v
    if m == -np.inf:
        raise DegenerateWeightsError("degenerate weight vector")
    e = np.exp(logw - m)
    s = e.sum()
    return e / s, m + np.log(s)


def normalize_log_weights(log_weights) -> WeightVector:
    """Softmax of log-weights with max subtraction.

    Raises:
        DegenerateWeightsError: every entry is ``-inf``.
    """
    lw = np.asarray(log_weights, dtype=float).ravel()
    if lw.size == 0:
        raise ValueError("need at least one weight")
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise SupportError("log-weights must be finite or -inf")
    normalized, log_sum = _normalize(lw)
    return WeightVector(lw.copy(), normalized, float(log_sum))


def ess(weights: WeightVector | np.ndarray) -> float:
    """Effective sample size ``1 / sum_k w_k**2`` of normalised weights."""
    w = weights.normalized if isinstance(weights, WeightVector) else np.asarray(weights, float)
    return float(1.0 / np.dot(w, w))


def log_weights(model: ModelSpec, proposal: ProposalSpec, x: np.ndarray, xis: np.ndarray) -> np.ndarray:
    """Log importance weights of a stack of noise vectors, shape ``(K,)``."""
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    x = np.asarray(x, dtype=float)
    zs = proposal.reparam(proposal.phi, xis, x)
    lw = model.log_joint(model.theta, x, zs) - proposal.log_density(proposal.phi, x, zs)
    bad = np.flatnonzero(~np.isfinite(lw))
    if bad.size:
        raise SupportError(f"non-finite log-weight at slot {int(bad[0])}: {lw[bad[0]]}")
    return lw


def log_weight(model: ModelSpec, proposal: ProposalSpec, x: np.ndarray, xi: np.ndarray) -> float:
    """``log p_theta(x, z) - log q_phi(z | x)`` at ``z = g_phi(xi, x)``."""
    return float(log_weights(model, proposal, x, np.asarray(xi, dtype=float)[None, :])[0])


def rng_stream(seed: int, stream_id: int, namespace: int = 0) -> np.random.Generator:
    """Independent reproducible stream keyed by ``(seed, namespace, stream_id)``.

    Built on ``SeedSequence`` spawn keys, so distinct ids give statistically
    independent PCG64 streams.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(namespace), int(stream_id)))
    return np.random.Generator(np.random.PCG64(ss))
