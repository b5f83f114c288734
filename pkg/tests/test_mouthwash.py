"""Tests for mouthwash.py — EM and coordinate-ascent fits, invariances, subsampling."""

import time

import numpy as np
import pytest
from scipy import optimize, special, stats

from data_model import validate_dataset
from factor_analysis import truncated_pca, weighted_gls
from mixture_prior import (
    Likelihood, PenaltySpec, UnimodalMixture, default_grid, log_component_densities,
    mixture_loglik,
)
from mouthwash import (
    MouthwashConfig, MouthwashProblem, MouthwashState, SubsampleTooSmall, coord_ascent_step,
    em_normal_step, fit_effects, fit_mouthwash, fit_mouthwash_subsampled, fit_normal_means,
    loglik_gradient, marginal_loglik,
)
from posterior import posterior_summaries
from rotation import ols_standard_errors, rotate


def _make_effects(seed=0, p=150, q=2, pi0=0.7, sd=2.0):
    rng = np.random.default_rng(seed)
    alpha = rng.normal(size=(q, p))
    z = rng.normal(size=q)
    shat = rng.uniform(0.5, 1.5, p)
    beta = np.where(rng.random(p) < pi0, 0.0, rng.normal(0, sd, p))
    bhat = beta + alpha.T @ z + shat * rng.normal(size=p)
    return bhat, shat, alpha


def _make_rotated(seed=0, n=20, p=200, q=2):
    rng = np.random.default_rng(seed)
    group = np.repeat([0.0, 1.0], n // 2)
    X = np.column_stack([np.ones(n), group])
    beta = np.where(rng.random(p) < 0.8, 0.0, rng.normal(0, 1.5, p))
    Z = rng.normal(size=(n, q)) + 0.5 * group[:, None]
    Y = np.outer(group, beta) + Z @ rng.normal(size=(q, p)) + rng.normal(size=(n, p))
    rm = rotate(validate_dataset(Y, X, 2))
    return rm, truncated_pca(rm.Y3, q)


def _fixed_sweeps(n, **kwargs):
    return MouthwashConfig(max_iters=n, rel_tol=1e-300, **kwargs)


def _nondecreasing(trace):
    return np.all(np.diff(trace) >= -1e-10 * np.maximum(1.0, np.abs(trace[:-1])))


# -- em_normal_step --

def test_em_objective_is_monotone():
    for seed in range(50):
        bhat, shat, alpha = _make_effects(seed, p=100)
        fit = fit_effects(bhat, shat, alpha, MouthwashConfig(max_iters=25))
        assert _nondecreasing(fit.objective_trace), seed
        assert np.allclose(fit.responsibilities.sum(axis=1), 1.0)


def test_em_weights_are_mean_responsibilities():
    x = np.array([0.2, -1.5, 3.0])
    grid = UnimodalMixture("normal", pi=[0.5, 0.5], tau=[0.0, 2.0])
    state = MouthwashState(pi=np.array([0.5, 0.5]), z=np.zeros(0), xi=1.0)
    joint = 0.5 * np.column_stack([np.exp(-x**2 / 2) / np.sqrt(2 * np.pi),
                                   np.exp(-x**2 / 10) / np.sqrt(10 * np.pi)])
    resp = joint / joint.sum(axis=1, keepdims=True)

    for lambda0, expected in [(1.0, resp.mean(axis=0)),
                              (10.0, (resp.sum(axis=0) + [9.0, 0.0]) / 12.0)]:
        problem = MouthwashProblem(x=x, s=np.ones(3), alpha=np.zeros((0, 3)), grid=grid,
                                   likelihood=Likelihood(), penalty=PenaltySpec(lambda0=lambda0),
                                   estimate_xi=False)
        assert np.allclose(em_normal_step(problem, state).pi, expected)


def test_em_with_null_only_prior_gives_gls():
    bhat, shat, alpha = _make_effects(1)
    grid = UnimodalMixture("normal", pi=[1.0, 0.0], tau=[0.0, 1.0])
    problem = MouthwashProblem(x=bhat, s=shat, alpha=alpha, grid=grid, likelihood=Likelihood(),
                               penalty=PenaltySpec(lambda0=1.0), estimate_xi=False)
    state = em_normal_step(problem, MouthwashState(pi=np.array([1.0, 0.0]), z=np.zeros(2), xi=1.0))
    assert np.array_equal(state.pi, [1.0, 0.0])
    assert np.allclose(state.z, weighted_gls(alpha, 1 / shat**2, bhat), rtol=1e-10)


# -- coord_ascent_step --

@pytest.mark.parametrize("kwargs", [
    {"mixture": "uniform"},
    {"mixture": "halfuniform", "likelihood": "t", "nu": 5.0},
])
def test_coordinate_ascent_is_monotone(kwargs):
    for seed in range(50):
        bhat, shat, alpha = _make_effects(seed, p=100)
        fit = fit_effects(bhat, shat, alpha, MouthwashConfig(max_iters=8, **kwargs))
        assert _nondecreasing(fit.objective_trace), seed


def test_gradient_matches_finite_differences():
    bhat, shat, alpha = _make_effects(2, p=80)
    grid = default_grid(bhat, shat, "uniform")
    problem = MouthwashProblem(x=bhat, s=shat, alpha=alpha, grid=grid, likelihood=Likelihood(nu=4.0),
                               penalty=PenaltySpec(), estimate_xi=True)
    rng = np.random.default_rng(3)
    h = 1e-5
    for _ in range(20):
        pi = rng.dirichlet(np.ones(grid.n_components))
        z = rng.normal(size=2)
        xi = rng.uniform(0.5, 2.0)
        fd = np.array([
            (marginal_loglik(problem, MouthwashState(pi, z + h * e, xi))
             - marginal_loglik(problem, MouthwashState(pi, z - h * e, xi))) / (2 * h)
            for e in np.eye(2)
        ])
        np.testing.assert_allclose(loglik_gradient(problem, pi, z, xi), fd, rtol=1e-5, atol=1e-6)


def test_coordinate_ascent_point_mass_gives_gls():
    bhat, shat, alpha = _make_effects(4, p=200)
    grid = UnimodalMixture("uniform", pi=[1.0, 0.0], lower=[0.0, -1.0], upper=[0.0, 1.0])
    problem = MouthwashProblem(x=bhat, s=shat, alpha=alpha, grid=grid, likelihood=Likelihood(),
                               penalty=PenaltySpec(lambda0=1.0), estimate_xi=False)
    state = coord_ascent_step(problem, MouthwashState(pi=np.array([1.0, 0.0]), z=np.zeros(2), xi=1.0))
    assert np.allclose(state.z, weighted_gls(alpha, 1 / shat**2, bhat), atol=1e-6)


# -- fit_effects --

def test_weights_match_independent_optimizer():
    bhat, shat, _ = _make_effects(5, p=300)
    cfg = MouthwashConfig(estimate_xi=False, penalty=PenaltySpec(lambda0=1.0), rel_tol=1e-12,
                          max_iters=20_000)
    fit = fit_effects(bhat, shat, np.zeros((0, 300)), cfg)
    log_lik = log_component_densities(fit.g_hat, bhat, shat)
    p, k = log_lik.shape

    lik = np.exp(log_lik)
    grad = (lik / (lik @ fit.g_hat.pi)[:, None]).sum(axis=0)
    assert np.all(grad <= p * 1.01)

    res = optimize.minimize(lambda t: -mixture_loglik(log_lik, special.softmax(t)),
                            np.zeros(k), method="BFGS", options={"gtol": 1e-8})
    assert fit.loglik >= -res.fun - 1e-4


def test_all_null_data_gives_large_pi0():
    rng = np.random.default_rng(6)
    shat = rng.uniform(0.5, 1.5, 5000)
    fit = fit_normal_means(shat * rng.normal(size=5000), shat)
    assert fit.g_hat.pi[0] >= 0.95


@pytest.mark.slow
def test_all_null_data_with_confounders_gives_large_pi0():
    rng = np.random.default_rng(7)
    p = 5000
    alpha = rng.normal(size=(2, p))
    shat = rng.uniform(0.5, 1.5, p)
    bhat = alpha.T @ np.array([0.5, -1.0]) + shat * rng.normal(size=p)
    fit = fit_effects(bhat, shat, alpha)
    assert fit.g_hat.pi[0] >= 0.95


def test_loadings_enter_only_through_rowspace():
    for seed in range(20):
        bhat, shat, alpha = _make_effects(seed)
        A = np.random.default_rng(100 + seed).normal(size=(2, 2)) + 3 * np.eye(2)
        cfg = _fixed_sweeps(60, estimate_xi=False)
        a = fit_effects(bhat, shat, alpha, cfg)
        b = fit_effects(bhat, shat, A @ alpha, cfg)
        assert np.allclose(a.g_hat.pi, b.g_hat.pi, atol=1e-6), seed
        assert np.allclose(a.responsibilities, b.responsibilities, atol=1e-6), seed
        assert np.allclose(alpha.T @ a.z_hat, (A @ alpha).T @ b.z_hat, atol=1e-6), seed


def test_rowspace_invariance_with_estimated_xi():
    for seed in range(3):
        bhat, shat, alpha = _make_effects(seed)
        A = np.array([[2.0, 0.5], [-1.0, 1.5]])
        cfg = _fixed_sweeps(30)
        a = fit_effects(bhat, shat, alpha, cfg)
        b = fit_effects(bhat, shat, A @ alpha, cfg)
        assert a.xi_hat == pytest.approx(b.xi_hat, abs=1e-6)
        assert np.allclose(a.responsibilities[:, 0], b.responsibilities[:, 0], atol=1e-6)


@pytest.mark.parametrize("estimate_xi,tol", [(False, 1e-8), (True, 1e-6)])
def test_fit_is_scale_equivariant(estimate_xi, tol):
    bhat, shat, alpha = _make_effects(8)
    c = 3.7
    mix = default_grid(bhat, shat)
    scaled_mix = UnimodalMixture("normal", pi=mix.pi, tau=c * mix.tau)
    cfg = _fixed_sweeps(60, estimate_xi=estimate_xi)
    a = fit_effects(bhat, shat, alpha, cfg, mix)
    b = fit_effects(c * bhat, c * shat, alpha, cfg, scaled_mix)
    assert np.allclose(a.g_hat.pi, b.g_hat.pi, atol=tol)
    assert np.allclose(a.responsibilities, b.responsibilities, atol=tol)
    assert np.allclose(c * a.z_hat, b.z_hat, rtol=tol, atol=tol)
    assert a.xi_hat == pytest.approx(b.xi_hat, abs=tol)


def test_xi_penalty_pushes_xi_up():
    bhat, shat, alpha = _make_effects(9)
    low = fit_effects(bhat, shat, alpha, MouthwashConfig(gamma=1, penalty=PenaltySpec(lambda_xi=1e-6)))
    high = fit_effects(bhat, shat, alpha, MouthwashConfig(gamma=1, penalty=PenaltySpec(lambda_xi=5.0)))
    assert high.xi_hat >= low.xi_hat - 1e-8


def test_more_starts_never_worse():
    bhat, shat, alpha = _make_effects(10, p=100)
    one = fit_effects(bhat, shat, alpha, MouthwashConfig(mixture="uniform", max_iters=20))
    three = fit_effects(bhat, shat, alpha, MouthwashConfig(mixture="uniform", max_iters=20, n_starts=3))
    assert three.objective >= one.objective


def test_grid_kind_must_match_config():
    bhat, shat, alpha = _make_effects(11)
    with pytest.raises(ValueError, match="does not match"):
        fit_effects(bhat, shat, alpha, MouthwashConfig(), default_grid(bhat, shat, "uniform"))


# -- MouthwashConfig --

def test_t_likelihood_needs_nu():
    with pytest.raises(ValueError, match="nu"):
        MouthwashConfig(mixture="uniform", likelihood="t")


def test_t_likelihood_needs_uniform_kind():
    with pytest.raises(ValueError, match="uniform"):
        MouthwashConfig(mixture="normal", likelihood="t", nu=4.0)


# -- fit_mouthwash --

def test_q_zero_fit_is_plain_shrinkage():
    rm, _ = _make_rotated(12)
    fa = truncated_pca(rm.Y3, 0)
    fit = fit_mouthwash(rm, fa, MouthwashConfig(estimate_xi=False))
    plain = fit_normal_means(rm.betahat, ols_standard_errors(rm, fa.sigma2))
    assert np.array_equal(fit.g_hat.pi, plain.g_hat.pi)
    assert fit.z_hat.shape == (0,)


def test_fit_mouthwash_on_rotated_data():
    rm, fa = _make_rotated(13)
    fit = fit_mouthwash(rm, fa)
    assert fit.z_hat.shape == (2,)
    assert fit.g_hat.pi.sum() == pytest.approx(1.0)
    assert _nondecreasing(fit.objective_trace)


# -- fit_mouthwash_subsampled --

def test_subsample_too_small():
    rm, fa = _make_rotated(14)
    with pytest.raises(SubsampleTooSmall):
        fit_mouthwash(rm, fa, MouthwashConfig(subsample=15))


def test_subsample_larger_than_p():
    rm, fa = _make_rotated(14)
    with pytest.raises(ValueError, match="exceeds"):
        fit_mouthwash_subsampled(rm, fa, MouthwashConfig(subsample=rm.p + 1))


def test_subsample_is_deterministic():
    rm, fa = _make_rotated(15)
    cfg = MouthwashConfig(subsample=100, seed=4, estimate_xi=False)
    a = fit_mouthwash(rm, fa, cfg)
    b = fit_mouthwash(rm, fa, cfg)
    assert np.array_equal(a.z_hat, b.z_hat)
    assert np.array_equal(a.g_hat.pi, b.g_hat.pi)
    assert a.responsibilities.shape[0] == rm.p


def test_full_subsample_matches_full_fit():
    rm, fa = _make_rotated(16)
    cfg = MouthwashConfig(estimate_xi=False, rel_tol=1e-11, max_iters=20_000)
    full = fit_mouthwash(rm, fa, cfg)
    sub = fit_mouthwash_subsampled(rm, fa, cfg.model_copy(update={"subsample": rm.p}))
    assert sub.objective >= full.objective - 1e-9
    assert sub.objective - full.objective <= 1e-6 * max(1.0, abs(full.objective))


@pytest.mark.slow
def test_subsampled_fit_is_fast_and_ranks_like_full_fit():
    rm, fa = _make_rotated(17, n=100, p=10_000, q=5)

    started = time.perf_counter()
    full = fit_mouthwash(rm, fa)
    full_time = time.perf_counter() - started
    started = time.perf_counter()
    sub = fit_mouthwash(rm, fa, MouthwashConfig(subsample=1000, seed=1))
    sub_time = time.perf_counter() - started

    assert full_time < 600
    assert sub_time < 60
    rho = stats.spearmanr(posterior_summaries(rm, fa, full).lfdr,
                          posterior_summaries(rm, fa, sub).lfdr).statistic
    assert rho >= 0.99
