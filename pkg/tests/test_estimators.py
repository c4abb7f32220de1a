from fractions import Fraction

import numpy as np
import pytest

from disir import (
    AugmentedState,
    CappedRunError,
    EstimatorConfig,
    ProposalSpec,
    WeightedStatistic,
    elbo_gradient_theta,
    h_rao_blackwell,
    iwae_bound_estimate,
    iwae_gradient_theta,
    iwae_phi_gradient,
    rmsprop_update,
    run_coupled_chains,
    signed_measure,
    unbiased_estimate,
    unbiased_expectation,
    unbiased_gradient,
)
from disir.coupling import CoupledTrajectory
from disir.estimators import calibrate_beta, fit_proposal
from disir.models import (
    LinearGaussianProposal,
    PpcaModel,
    identity_statistic,
    ppca_exact_posterior,
    ppca_grad_theta,
)


def _ppca(Dz=3, Dx=5, seed=0):
    rng = np.random.default_rng(seed)
    m = PpcaModel.random(Dz, Dx, rng)
    return m, m.sample(4, rng)


def _orthogonal_ppca(Dz=2, Dx=4, seed=0):
    # theta1 with orthogonal rows gives a diagonal posterior covariance
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(Dx, Dz)))
    m = PpcaModel(rng.normal(size=Dx), (Q * np.array([1.5, 0.7][:Dz])).T)
    return m, m.sample(3, rng)


# ---------------------------------------------------------------------------
# Rao-Blackwellised integrand


def test_h_duplicate_slots_equal_pointwise_gradient():
    m, X = _ppca()
    q = LinearGaussianProposal.standard(3, 5)
    xi = np.array([0.3, -0.1, 0.8])
    s = AugmentedState(np.tile(xi, (4, 1)), 2)
    g = ppca_grad_theta(m.theta, X[0], (q.mean(X[0]) + np.exp(q.log_s) * xi)[None])[0]
    np.testing.assert_allclose(h_rao_blackwell(s, m.spec(), q.spec(), X[0]), g, rtol=1e-13, atol=1e-13)


def test_h_matches_independent_weighted_sum():
    m, X = _ppca()
    q = LinearGaussianProposal.standard(3, 5)
    rng = np.random.default_rng(4)
    x = X[1]
    for _ in range(10):
        s = AugmentedState.initial(7, 3, rng)
        zs = q.mean(x) + np.exp(q.log_s) * s.xis
        lw = []
        grads = []
        C = m.sigma2
        for z in zs:
            r = x - m.theta0 - m.theta1.T @ z
            lp = -0.5 * z @ z - 0.5 * r @ r / C - 0.5 * 3 * np.log(2 * np.pi) - 0.5 * 5 * np.log(2 * np.pi * C)
            lq = -0.5 * np.sum(s.xis[len(lw)] ** 2) - np.sum(q.log_s) - 1.5 * np.log(2 * np.pi)
            lw.append(lp - lq)
            grads.append(np.concatenate([r / C, np.outer(z, r / C).ravel()]))
        w = np.exp(np.array(lw) - max(lw))
        w /= w.sum()
        expect = w @ np.array(grads)
        np.testing.assert_allclose(h_rao_blackwell(s, m.spec(), q.spec(), x), expect, rtol=1e-10, atol=1e-10)


# ---------------------------------------------------------------------------
# lagged estimator on hand-built trajectories


def _traj(values_a, values_b, tau, L, t0):
    ha = np.asarray(values_a, dtype=float).reshape(-1, 1, 1).repeat(2, axis=1)
    hb = np.asarray(values_b, dtype=float).reshape(-1, 1, 1).repeat(2, axis=1)
    return CoupledTrajectory(
        ha, np.zeros(len(ha), dtype=np.int64), hb, np.zeros(len(hb), dtype=np.int64),
        tau, L, t0, tau < 0, 0, np.zeros(len(ha)),
    )


def _first_slot(state):
    return np.array([state.xis[0, 0]])


def test_plain_average_when_meeting_at_lag():
    # L = 3, t0 = 1, tau = L: only the first sum contributes
    tr = _traj([9, 1, 2, 6], [0, 6], tau=3, L=3, t0=1)
    assert unbiased_estimate(tr, _first_slot)[0] == 3.0


def test_correction_terms_by_hand():
    L, t0, tau = 2, 1, 6
    a = [0, 1, 2, 3, 4, 5, 7]
    b = [10, 20, 30, 40, 7]
    tr = _traj(a, b, tau, L, t0)
    expect = Fraction(1, L) * (a[1] + a[2] + sum(a[t] - b[t - L] for t in range(t0 + L, tau)))
    assert unbiased_estimate(tr, _first_slot)[0] == float(expect)


def test_constant_h_is_exact_on_random_trajectories():
    m, X = _ppca()
    q = LinearGaussianProposal.matched(m)
    c = np.array([0.1, 1.0 / 3.0, -7.25e5])
    for seed in range(5):
        cfg = EstimatorConfig(K=5, L=3, t0=1)
        tr = run_coupled_chains(m.spec(), q.spec(), X[0], cfg, np.random.default_rng(seed))
        assert np.array_equal(unbiased_estimate(tr, lambda s: c), c)


def test_signed_measure_structure_and_contraction():
    m, X = _ppca()
    q = LinearGaussianProposal.standard(3, 5)
    cfg = EstimatorConfig(K=5, L=3, t0=1)
    seen_corrections = False
    for seed in range(8):
        tr = run_coupled_chains(m.spec(), q.spec(), X[0], cfg, np.random.default_rng(seed))
        mu = signed_measure(tr)
        assert mu.total_mass == 1
        if tr.tau <= cfg.t0 + cfg.L:
            assert len(mu.atoms) == cfg.L and all(w == Fraction(1, cfg.L) for w in mu.masses())
        else:
            seen_corrections = True
        h = WeightedStatistic(m.spec(), q.spec(), X[0])
        assert np.array_equal(mu.integrate(h), unbiased_estimate(tr, h))
        assert np.array_equal(mu.integrate(lambda s: h(s)), unbiased_estimate(tr, h))
    assert seen_corrections


def test_capped_policies():
    m, X = _ppca(Dz=6, Dx=12)
    q = LinearGaussianProposal.standard(6, 12)
    # the pair cannot meet at t = L, so the run stops capped right away
    cfg = EstimatorConfig(K=3, L=2, t0=0, max_iterations=2)
    with pytest.raises(CappedRunError):
        unbiased_gradient(m.spec(), q.spec(), X[:1], cfg, np.random.default_rng(0))
    from dataclasses import replace

    est = unbiased_gradient(m.spec(), q.spec(), X[:1], replace(cfg, capped_policy="accept"), np.random.default_rng(0))
    assert est.capped and est.tau == -1 and np.all(np.isfinite(est.value))


def test_config_validation():
    for bad in (dict(K=1), dict(L=0), dict(t0=-1), dict(max_iterations=5, L=10), dict(beta_init=1.0),
                dict(beta_policy="x"), dict(capped_policy="x")):
        with pytest.raises(ValueError):
            EstimatorConfig(**bad)
    assert EstimatorConfig().controller().frozen
    assert not EstimatorConfig(beta_policy="adaptive").controller().frozen


# ---------------------------------------------------------------------------
# full pipeline


def test_batch_of_one_equals_single_pipeline():
    m, X = _ppca()
    q = LinearGaussianProposal.matched(m)
    cfg = EstimatorConfig(K=5)
    est = unbiased_gradient(m.spec(), q.spec(), X[:1], cfg, np.random.default_rng(7))
    child = np.random.default_rng(7).spawn(1)[0]
    single, tr = unbiased_expectation(m.spec(), q.spec(), X[0], cfg, child)
    assert np.array_equal(est.value, single) and est.tau == tr.tau


def test_identical_seeds_identical_estimates():
    m, X = _ppca()
    q = LinearGaussianProposal.matched(m)
    cfg = EstimatorConfig(K=5)
    a = unbiased_gradient(m.spec(), q.spec(), X, cfg, np.random.default_rng(1))
    b = unbiased_gradient(m.spec(), q.spec(), X, cfg, np.random.default_rng(1))
    assert np.array_equal(a.value, b.value) and a.tau == b.tau and a.work == b.work
    assert a.taus.shape == (4,) and a.tau == a.taus.max()


def test_per_datapoint_betas_are_used():
    m, X = _ppca()
    q = LinearGaussianProposal.matched(m)
    cfg = EstimatorConfig(K=5)
    a = unbiased_gradient(m.spec(), q.spec(), X, cfg, np.random.default_rng(1), betas=[0.5] * 4)
    b = unbiased_gradient(m.spec(), q.spec(), X, cfg, np.random.default_rng(1))
    c = unbiased_gradient(m.spec(), q.spec(), X, cfg, np.random.default_rng(1), betas=[0.9] * 4)
    assert np.array_equal(a.value, b.value)
    assert not np.array_equal(a.value, c.value)
    with pytest.raises(ValueError):
        unbiased_gradient(m.spec(), q.spec(), X, cfg, np.random.default_rng(1), betas=[0.5])


def test_conjugate_gaussian_posterior_mean():
    # Dz = Dx = 1 PPCA is a conjugate Gaussian model
    m = PpcaModel(np.array([0.3]), np.array([[0.8]]))
    x = np.array([1.4])
    mean, cov = ppca_exact_posterior(m, x)
    q = LinearGaussianProposal.standard(1, 1)
    cfg = EstimatorConfig(K=4, L=3, t0=1, beta_init=0.5)
    R = 100000
    vals = np.empty(R)
    for r in range(R):
        est, _ = unbiased_expectation(m.spec(), q.spec(), x, cfg, np.random.default_rng([5, r]), identity_statistic)
        vals[r] = est[0]
    z = (vals.mean() - mean[0]) / (vals.std(ddof=1) / np.sqrt(R))
    assert abs(z) < 4


def test_calibrate_beta_in_range():
    m, X = _ppca()
    q = LinearGaussianProposal.matched(m)
    b = calibrate_beta(m.spec(), q.spec(), X[0], 6, np.random.default_rng(0), steps=50)
    assert 1e-6 <= b <= 1 - 1e-6


# ---------------------------------------------------------------------------
# biased baselines


def test_iwae_with_one_sample_is_elbo():
    m, X = _ppca()
    q = LinearGaussianProposal.standard(3, 5)
    a = iwae_gradient_theta(m.spec(), q.spec(), X[0], 1, np.random.default_rng(3))
    b = elbo_gradient_theta(m.spec(), q.spec(), X[0], np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_constant_weights_give_plain_average():
    m, X = _orthogonal_ppca()
    q = LinearGaussianProposal.matched(m)
    x = X[0]
    rng = np.random.default_rng(2)
    g = iwae_gradient_theta(m.spec(), q.spec(), x, 6, rng)
    xis = np.random.default_rng(2).standard_normal((6, 2))
    zs = q.mean(x) + np.exp(q.log_s) * xis
    np.testing.assert_allclose(g, ppca_grad_theta(m.theta, x, zs).mean(0), rtol=1e-9, atol=1e-9)


def test_iwae_phi_gradient_matches_finite_differences():
    m, X = _ppca()
    q = LinearGaussianProposal.standard(3, 5)
    q = LinearGaussianProposal.from_phi(q.phi + np.random.default_rng(0).normal(scale=0.2, size=q.phi.size), 3, 5)
    ms, ps = m.spec(), q.spec()
    xis = np.random.default_rng(1).standard_normal((8, 3))
    g = iwae_phi_gradient(ms, ps, X[0], 8, xis=xis)
    direction = np.random.default_rng(2).normal(size=g.size)
    direction /= np.linalg.norm(direction)
    h = 1e-5
    f = lambda p: iwae_bound_estimate(ms, ps.with_phi(p), X[0], 8, xis=xis)
    fd = (f(ps.phi + h * direction) - f(ps.phi - h * direction)) / (2 * h)
    assert abs(fd - g @ direction) / abs(g @ direction) < 1e-4


def test_iwae_phi_gradient_vanishes_at_exact_posterior():
    m, X = _orthogonal_ppca()
    q = LinearGaussianProposal.matched(m)
    rng = np.random.default_rng(3)
    R = 4000
    G = np.array([iwae_phi_gradient(m.spec(), q.spec(), X[0], 5, rng) for _ in range(R)])
    se = G.std(0, ddof=1) / np.sqrt(R)
    mask = se > 0
    assert np.all(np.abs(G.mean(0)[mask]) < 4 * se[mask])
    assert np.allclose(G.mean(0)[~mask], 0, atol=1e-8)


def test_iwae_phi_gradient_edge_cases():
    m, X = _ppca()
    q = LinearGaussianProposal.standard(3, 5).spec()
    empty = ProposalSpec(np.zeros(0), q.log_density, q.reparam)
    assert iwae_phi_gradient(m.spec(), empty, X[0], 3, np.random.default_rng(0)).shape == (0,)
    bare = ProposalSpec(q.phi, q.log_density, q.reparam)
    with pytest.raises(NotImplementedError):
        iwae_phi_gradient(m.spec(), bare, X[0], 3, np.random.default_rng(0))


def test_fit_proposal_improves_bound():
    m, X = _ppca()
    train = m.sample(300, np.random.default_rng(5))
    q0 = LinearGaussianProposal.standard(3, 5).spec()
    q1, trace = fit_proposal(m.spec(), q0, train, 10, 200, np.random.default_rng(6), lr=0.02)
    before = np.mean([iwae_bound_estimate(m.spec(), q0, x, 10, np.random.default_rng(i)) for i, x in enumerate(train[:100])])
    after = np.mean([iwae_bound_estimate(m.spec(), q1, x, 10, np.random.default_rng(i)) for i, x in enumerate(train[:100])])
    assert after > before and trace.shape == (200,)


# ---------------------------------------------------------------------------
# RMSProp


def test_rmsprop_hand_value():
    p, s = rmsprop_update(np.array([0.0]), np.array([1.0]), np.array([0.0]), 0.1, 0.9, 0.0)
    assert s[0] == pytest.approx(0.1)
    assert p[0] == pytest.approx(0.31623, abs=5e-6)


def test_rmsprop_zero_gradient_and_purity():
    params = np.array([1.0, -2.0])
    state = np.array([0.3, 0.1])
    p, s = rmsprop_update(params, np.zeros(2), state, 0.5)
    assert np.array_equal(p, params)
    a = rmsprop_update(params, np.array([0.2, 0.4]), state, 0.01)
    b = rmsprop_update(params, np.array([0.2, 0.4]), state, 0.01)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert np.array_equal(state, [0.3, 0.1])
    with pytest.raises(ValueError):
        rmsprop_update(params, np.zeros(3), state, 0.1)
