from fractions import Fraction

import numpy as np
import pytest

from disir import AugmentedState, disir_step, isir_step_zspace
from disir.models import (
    SIGMA2,
    BimodalToy1D,
    DiscreteToyTarget,
    LinearGaussianProposal,
    PpcaModel,
    enumerate_transition_law,
    ppca_exact_marginal_grad,
    ppca_exact_posterior,
    ppca_grad_theta,
    ppca_grad_z,
    ppca_log_joint,
    ppca_log_marginal,
    ppca_ml_solution,
    toy_trace,
)
from disir.models.ppca import lg_inverse, lg_reparam

from conftest import central_diff, rel_err


def _random(Dz=3, Dx=4, seed=0):
    rng = np.random.default_rng(seed)
    m = PpcaModel(rng.normal(size=Dx), rng.normal(size=(Dz, Dx)))
    return m, rng.normal(size=Dx), rng.normal(size=Dz)


# ---------------------------------------------------------------------------
# PPCA joint


def test_sigma2_is_fixed():
    assert SIGMA2 == 0.1
    with pytest.raises(ValueError):
        PpcaModel(np.zeros(2), np.zeros((1, 2)), sigma2=0.2)


def test_log_joint_hand_value():
    m, _, _ = _random()
    val = ppca_log_joint(m.theta, m.theta0, np.zeros((1, 3)))[0]
    expect = -1.5 * np.log(2 * np.pi) - 2.0 * np.log(2 * np.pi * 0.1)
    assert val == pytest.approx(expect, rel=1e-14)


def test_zero_residual_gives_zero_theta0_gradient():
    m, _, z = _random()
    x = m.theta0 + m.theta1.T @ z
    g = ppca_grad_theta(m.theta, x, z[None])[0]
    np.testing.assert_allclose(g[:4], 0.0, atol=1e-12)


def test_joint_gradient_finite_differences():
    m, x, z = _random()
    g = ppca_grad_theta(m.theta, x, z[None])[0]
    fd = central_diff(lambda th: ppca_log_joint(th, x, z[None])[0], m.theta)
    assert rel_err(g, fd) < 1e-5
    gz = ppca_grad_z(m.theta, x, z[None])[0]
    fdz = central_diff(lambda zz: ppca_log_joint(m.theta, x, zz[None])[0], z)
    assert rel_err(gz, fdz) < 1e-5


# ---------------------------------------------------------------------------
# marginal


def test_marginal_gradient_at_mean_has_zero_theta0_block():
    m, _, _ = _random()
    np.testing.assert_allclose(ppca_exact_marginal_grad(m, m.theta0)[:4], 0.0, atol=1e-14)


def test_marginal_gradient_finite_differences():
    m, x, _ = _random()
    g = ppca_exact_marginal_grad(m, x)
    fd = central_diff(lambda th: ppca_log_marginal(PpcaModel.from_theta(th, 3, 4), x), m.theta)
    assert rel_err(g, fd) < 1e-6


def test_marginal_gradient_with_zero_loadings():
    m, x, _ = _random()
    m0 = PpcaModel(m.theta0, np.zeros((3, 4)))
    np.testing.assert_allclose(ppca_exact_marginal_grad(m0, x)[:4], (x - m.theta0) / 0.1, rtol=1e-12)


def test_marginal_batch_additivity():
    m, _, _ = _random()
    X = np.random.default_rng(3).normal(size=(6, 4))
    total = sum(ppca_exact_marginal_grad(m, x) for x in X)
    np.testing.assert_allclose(ppca_exact_marginal_grad(m, X), total, rtol=1e-12, atol=1e-12)
    assert ppca_log_marginal(m, X) == pytest.approx(sum(ppca_log_marginal(m, x) for x in X), rel=1e-13)


def test_marginal_matches_scipy():
    from scipy.stats import multivariate_normal

    m, x, _ = _random()
    ref = multivariate_normal(m.theta0, m.theta1.T @ m.theta1 + 0.1 * np.eye(4)).logpdf(x)
    assert ppca_log_marginal(m, x) == pytest.approx(ref, rel=1e-12)


# ---------------------------------------------------------------------------
# posterior


def test_posterior_with_zero_loadings_is_prior():
    m, x, _ = _random()
    mean, cov = ppca_exact_posterior(PpcaModel(m.theta0, np.zeros((3, 4))), x)
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_allclose(cov, np.eye(3))


def test_posterior_mean_vanishes_at_marginal_mean():
    m, _, _ = _random()
    mean, _ = ppca_exact_posterior(m, m.theta0)
    np.testing.assert_allclose(m.theta0 + m.theta1.T @ mean, m.theta0, atol=1e-14)


def test_posterior_against_importance_sampling():
    rng = np.random.default_rng(4)
    m = PpcaModel(rng.normal(size=3), rng.normal(scale=0.3, size=(2, 3)))
    x = m.sample(1, rng)[0]
    mean, cov = ppca_exact_posterior(m, x)
    n = 400000
    z = rng.standard_normal((n, 2))
    lw = ppca_log_joint(m.theta, x, z) + 0.5 * np.sum(z * z, axis=1)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    est = w @ z
    # delta-method standard error of the self-normalised estimate
    se = np.sqrt(np.sum(w[:, None] ** 2 * (z - est) ** 2, axis=0))
    assert np.all(np.abs(est - mean) < 4 * se)
    est_cov = (z - est).T @ (w[:, None] * (z - est))
    np.testing.assert_allclose(est_cov, cov, atol=0.02)


def test_proposal_inverse_roundtrip():
    rng = np.random.default_rng(0)
    q = LinearGaussianProposal.from_phi(rng.normal(size=3 * 4 + 6), 3, 4)
    x = rng.normal(size=4)
    xi = rng.standard_normal((50, 3))
    back = lg_inverse(q.phi, lg_reparam(q.phi, xi, x), x)
    assert np.max(np.abs(back - xi)) < 1e-12


def test_proposal_sample_has_right_moments():
    q = LinearGaussianProposal(np.ones((2, 3)) * 0.1, np.array([1.0, -1.0]), np.log([0.5, 2.0]))
    x = np.array([1.0, 2.0, 3.0])
    s = q.spec().sample(q.phi, x, 100000, np.random.default_rng(1))
    np.testing.assert_allclose(s.mean(0), q.mean(x), atol=0.03)
    np.testing.assert_allclose(s.std(0), [0.5, 2.0], rtol=0.02)


def test_ml_solution_is_stationary():
    rng = np.random.default_rng(0)
    truth = PpcaModel(rng.normal(size=5), rng.normal(size=(2, 5)))
    X = truth.sample(500, rng)
    ml = ppca_ml_solution(X, 2)
    g = ppca_exact_marginal_grad(ml, X)
    assert np.max(np.abs(g)) < 1e-8 * np.abs(ppca_log_marginal(ml, X))
    ll = ppca_log_marginal(ml, X)
    for _ in range(5):
        other = PpcaModel.from_theta(ml.theta + 0.01 * rng.normal(size=ml.theta.size), 2, 5)
        assert ppca_log_marginal(other, X) < ll


# ---------------------------------------------------------------------------
# two-atom toy


def test_transition_rows_sum_to_one_exactly():
    t = DiscreteToyTarget()
    for K in (2, 3):
        law = enumerate_transition_law(t, "isir", K)
        assert all(sum(row) == 1 for row in law.exact)


def test_two_slot_hand_matrix():
    # target (0.8, 0.2), proposal (0.5, 0.5): weights 1.6 and 0.4
    #   from atom 0: fresh 0 w.p. 1/2 (stay), fresh 1 w.p. 1/2 then keep 0 w.p. 1.6/2.0
    #   from atom 1: fresh 0 w.p. 1/2 then move w.p. 1.6/2.0, fresh 1 w.p. 1/2 (stay)
    law = enumerate_transition_law(DiscreteToyTarget((0.8, 0.2), (0.5, 0.5)), "isir", 2)
    np.testing.assert_allclose(law.selected_atom_matrix(), [[0.9, 0.1], [0.4, 0.6]], atol=1e-15)


def test_perfect_proposal_rows():
    # equal weights: ell* is uniform over the K slots, one of which is the retained atom
    target = (0.7, 0.3)
    for K in (2, 3, 4):
        P = enumerate_transition_law(DiscreteToyTarget(target, target), "isir", K).selected_atom_matrix()
        expect = np.eye(2) / K + (K - 1) / K * np.array([target, target])
        np.testing.assert_allclose(P, expect, atol=1e-12)


def test_target_is_stationary_for_selected_atom():
    t = DiscreteToyTarget((0.8, 0.2), (0.3, 0.7))
    P = enumerate_transition_law(t, "isir", 3).selected_atom_matrix()
    np.testing.assert_allclose(np.array([0.8, 0.2]) @ P, [0.8, 0.2], atol=1e-12)


def test_enumeration_errors():
    with pytest.raises(ValueError):
        enumerate_transition_law(DiscreteToyTarget(), "hmc", 2)
    with pytest.raises(ValueError):
        enumerate_transition_law(DiscreteToyTarget(), "isir", 5)
    with pytest.raises(ValueError):
        DiscreteToyTarget((0.5, 0.6))


def test_toy_kernels_agree_with_enumeration_empirically():
    t = DiscreteToyTarget((0.8, 0.2), (0.4, 0.6))
    P = enumerate_transition_law(t, "isir", 2).matrix
    law = enumerate_transition_law(t, "isir", 2)
    ms, ps = t.model_spec(), t.proposal_spec()
    x = np.zeros(1)
    start = ((0, 1), 1)
    i = law.states.index(start)
    n = 40000
    rng = np.random.default_rng(0)
    zs = np.array([[0.0], [1.0]])
    counts_z = np.zeros(len(law.states))
    counts_xi = np.zeros(len(law.states))
    q0 = 0.4
    from scipy.special import ndtri

    xis = np.array([[ndtri(q0 / 2)], [ndtri((1 + q0) / 2)]])
    for _ in range(n):
        out, ell = isir_step_zspace(zs, 1, ms, ps, x, rng)
        counts_z[law.index(tuple(int(a) for a in out[:, 0]), ell)] += 1
        s, _ = disir_step(AugmentedState(xis, 1), 0.0, ms, ps, x, rng)
        atoms = tuple(int(a) for a in ps.reparam(ps.phi, np.ascontiguousarray(s.xis), x)[:, 0])
        counts_xi[law.index(atoms, s.ell)] += 1
    se = np.sqrt(P[i] * (1 - P[i]) / n)
    assert np.all(np.abs(counts_z / n - P[i]) <= 4 * se + 1e-12)
    assert np.all(np.abs(counts_xi / n - P[i]) <= 4 * se + 1e-12)


# ---------------------------------------------------------------------------
# bimodal toy


def test_bimodal_validation_and_cdf():
    with pytest.raises(ValueError):
        BimodalToy1D(weights=(0.5, 0.6))
    with pytest.raises(ValueError):
        BimodalToy1D(stddevs=(0.0, 1.0))
    t = BimodalToy1D()
    assert t.cdf(0.0) == pytest.approx(0.5)


def test_bimodal_log_joint_is_mixture_density():
    from scipy.stats import norm

    t = BimodalToy1D()
    ms = t.model_spec()
    z = np.array([[-2.1], [0.3], [1.7]])
    ref = np.log(0.5 * norm.pdf(z[:, 0], -2, 0.5) + 0.5 * norm.pdf(z[:, 0], 2, 0.5))
    np.testing.assert_allclose(ms.log_joint(ms.theta, t.x, z), ref, rtol=1e-12)
    fd = central_diff(lambda th: ms.log_joint(th, t.x, z[:1])[0], ms.theta)
    assert rel_err(ms.grad_theta_log_joint(ms.theta, t.x, z[:1])[0], fd) < 1e-5


def test_toy_trace_deterministic_and_shaped():
    t = BimodalToy1D()
    a = toy_trace(t, "isir-disir", 50, np.random.default_rng(3))
    b = toy_trace(t, "isir-disir", 50, np.random.default_rng(3))
    assert a == b and len(a) == 50 and a[0][0] == 1
    assert toy_trace(t, "isir", 0, np.random.default_rng(3)) == []
    assert all(r[2] == 0.0 for r in toy_trace(t, "isir", 20, np.random.default_rng(3)))
    with pytest.raises(ValueError):
        toy_trace(t, "hmc", 5, np.random.default_rng(0))
