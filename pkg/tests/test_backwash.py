"""Tests for backwash.py — variational EM under the confounder g-prior."""

from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, special, stats

from backwash import BackwashConfig, backwash_init, elbo, fit_backwash, loading_basis
from backwash import _rescale_v, _update_v
from data_model import validate_dataset
from factor_analysis import FactorEstimate, truncated_pca
from mixture_prior import PenaltySpec, UnimodalMixture, default_grid
from mouthwash import MouthwashConfig, fit_effects, fit_normal_means
from posterior import pi0, posterior_summaries
from rotation import RotatedModel, rotate
from simulation import SimulationConfig, simulate


def _make_model(bhat, shat, alpha):
    """Rotated model whose OLS effects and standard errors are exactly (bhat, shat)."""
    p = bhat.size
    rm = RotatedModel(r22=1.0, y2=bhat, Y3=np.zeros((1, p)), betahat=bhat, xtx_inv_diag=1.0,
                      R11=np.zeros((0, 0)), r12=np.zeros(0), Y1=np.zeros((0, p)))
    fa = FactorEstimate(alpha=alpha, sigma2=shat**2, q=alpha.shape[0], df=10)
    return rm, fa


def _make_effects(seed=0, p=200, q=2):
    rng = np.random.default_rng(seed)
    alpha = rng.normal(size=(q, p))
    shat = rng.uniform(0.5, 1.5, p)
    beta = np.where(rng.random(p) < 0.7, 0.0, rng.normal(0, 2.0, p))
    bhat = beta + alpha.T @ rng.normal(size=q) + shat * rng.normal(size=p)
    return bhat, shat, alpha


# -- loading_basis --

def test_loading_basis_is_orthonormal():
    _, _, alpha = _make_effects()
    A = loading_basis(alpha)
    assert A.shape == (200, 2)
    assert np.allclose(A.T @ A, np.eye(2), atol=1e-8)


def test_loading_basis_spans_rowspace():
    _, _, alpha = _make_effects()
    R = np.array([[2.0, 1.0], [0.5, -1.0]])
    A, B = loading_basis(alpha), loading_basis(R @ alpha)
    assert np.allclose(A @ A.T, B @ B.T, atol=1e-10)


def test_zero_loadings_rejected():
    with pytest.raises(ValueError, match="zero"):
        loading_basis(np.zeros((1, 5)))


# -- backwash_init --

def test_init_solves_weighted_least_squares():
    bhat, shat, alpha = _make_effects(1)
    rm, fa = _make_model(bhat, shat, alpha)
    state = backwash_init(rm, fa)
    assert state.phi == 1.0 and state.xi == 1.0

    eb = fit_normal_means(bhat, shat, default_grid(bhat, shat))
    mu_beta = posterior_summaries(None, None, eb).post_mean
    A = loading_basis(alpha)
    expected = np.linalg.lstsq(A / shat[:, None], (bhat - mu_beta) / shat, rcond=None)[0]
    assert np.allclose(state.mu_v, expected, atol=1e-8)


def test_init_uses_fixed_values():
    bhat, shat, alpha = _make_effects(2)
    rm, fa = _make_model(bhat, shat, alpha)
    state = backwash_init(rm, fa, cfg=BackwashConfig(fixed_phi=0.3, fixed_xi=2.0))
    assert (state.phi, state.xi) == (0.3, 2.0)


# -- fit_backwash --

def test_elbo_is_monotone():
    for seed in range(50):
        bhat, shat, alpha = _make_effects(seed)
        rm, fa = _make_model(bhat, shat, alpha)
        fit = fit_backwash(rm, fa, cfg=BackwashConfig(max_iters=100, rel_tol=1e-14))
        trace = fit.elbo_trace
        assert np.all(np.isfinite(trace)), seed
        assert np.all(np.diff(trace) >= -1e-8 * np.maximum(1.0, np.abs(trace[:-1]))), seed


def test_long_fit_does_not_stop_on_a_non_finite_elbo():
    bhat, shat, alpha = _make_effects(0)
    rm, fa = _make_model(bhat, shat, alpha)
    fit = fit_backwash(rm, fa, cfg=BackwashConfig(max_iters=100, rel_tol=1e-14))
    assert np.all(np.isfinite(fit.elbo_trace))
    if fit.converged:
        assert abs(fit.elbo_trace[-1] - fit.elbo_trace[-2]) <= 1e-14 * abs(fit.elbo_trace[-2])


def test_underflowed_weight_keeps_elbo_finite():
    bhat, shat, alpha = _make_effects(10)
    rm, fa = _make_model(bhat, shat, alpha)
    state = fit_backwash(rm, fa, cfg=BackwashConfig(max_iters=5)).state
    pi = state.pi.copy()
    pi[-1] = 0.0
    gamma = state.gamma.copy()
    gamma[:, -1] = 1e-310
    value = elbo(replace(state, pi=pi / pi.sum(), gamma=gamma), bhat, shat**2, PenaltySpec())
    assert np.isfinite(value)


def test_rescaling_v_raises_elbo_and_keeps_fit():
    bhat, shat, alpha = _make_effects(11)
    rm, fa = _make_model(bhat, shat, alpha)
    state = fit_backwash(rm, fa, cfg=BackwashConfig(max_iters=3)).state
    stretched = replace(state, mu_v=3.0 * state.mu_v, Sigma_v=9.0 * state.Sigma_v, phi=state.phi / 3.0)
    rescaled = _rescale_v(stretched)
    assert elbo(rescaled, bhat, shat**2) >= elbo(stretched, bhat, shat**2)
    assert np.allclose(rescaled.phi * rescaled.mu_v, stretched.phi * stretched.mu_v)
    size = np.trace(rescaled.Sigma_v) + rescaled.mu_v @ rescaled.mu_v
    assert size == pytest.approx(rescaled.mu_v.size)


def test_single_gene_elbo_is_exact_marginal():
    bhat, shat = np.array([1.3]), np.array([0.6])
    rm, fa = _make_model(bhat, shat, np.array([[0.7]]))
    mix = UnimodalMixture("normal", pi=[1.0], tau=[0.0])
    fit = fit_backwash(rm, fa, mix, BackwashConfig(fixed_phi=0.8, fixed_xi=1.5))

    closed = stats.norm.logpdf(1.3, scale=np.sqrt(1.5 * 0.36 + 0.64))
    quad = np.log(integrate.quad(
        lambda v: stats.norm.pdf(1.3, loc=0.8 * v, scale=np.sqrt(1.5 * 0.36)) * stats.norm.pdf(v),
        -np.inf, np.inf, epsabs=1e-13)[0])
    assert fit.elbo_trace[-1] == pytest.approx(closed, abs=1e-6)
    assert quad == pytest.approx(closed, abs=1e-6)


def test_elbo_bounds_penalized_marginal():
    rng = np.random.default_rng(3)
    bhat, shat = np.array([0.4, -2.5, 3.1]), np.array([1.0, 0.8, 1.2])
    alpha = rng.normal(size=(1, 3))
    rm, fa = _make_model(bhat, shat, alpha)
    penalty = PenaltySpec()
    fit = fit_backwash(rm, fa, cfg=BackwashConfig(penalty=penalty))
    st = fit.state
    tau2 = st.tau2
    a = st.A[:, 0]

    def integrand(v):
        var = st.xi * shat[:, None] ** 2 + tau2[None, :]
        dens = stats.norm.pdf(bhat[:, None], loc=st.phi * a[:, None] * v, scale=np.sqrt(var)) @ st.pi
        return np.prod(dens) * stats.norm.pdf(v)

    marginal = np.log(integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-14)[0])
    marginal += np.sum(special.xlogy(penalty.vector(st.pi.size) - 1, st.pi))
    assert elbo(st, bhat, shat**2, penalty) <= marginal + 1e-8


def test_mu_v_update_maximizes_elbo():
    bhat, shat, alpha = _make_effects(4)
    rm, fa = _make_model(bhat, shat, alpha)
    fit = fit_backwash(rm, fa)
    state = _update_v(fit.state, bhat, shat**2)
    moved = replace(state, mu_v=state.mu_v + 0.3)
    assert elbo(state, bhat, shat**2) > elbo(moved, bhat, shat**2)


def test_zero_phi_matches_plain_shrinkage():
    bhat, shat, alpha = _make_effects(5)
    rm, fa = _make_model(bhat, shat, alpha)
    mix = default_grid(bhat, shat)
    fit = fit_backwash(rm, fa, mix, BackwashConfig(fixed_phi=0.0, fixed_xi=1.0, rel_tol=1e-13,
                                                    max_iters=20_000))
    plain = fit_effects(bhat, shat, np.zeros((0, bhat.size)),
                        MouthwashConfig(estimate_xi=False, rel_tol=1e-13, max_iters=20_000), mix)
    assert np.allclose(fit.adjusted_betahat, bhat)
    lfdr_bw = posterior_summaries(rm, fa, fit).lfdr
    lfdr_mw = posterior_summaries(None, None, plain).lfdr
    assert np.allclose(lfdr_bw, lfdr_mw, atol=1e-4)


def test_orthogonal_rotation_of_loadings_leaves_fit_unchanged():
    bhat, shat, alpha = _make_effects(6)
    t = 0.7
    Q = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    cfg = BackwashConfig(max_iters=100, rel_tol=1e-300)
    rm, fa = _make_model(bhat, shat, alpha)
    rm2, fa2 = _make_model(bhat, shat, Q @ alpha)
    a, b = fit_backwash(rm, fa, cfg=cfg), fit_backwash(rm2, fa2, cfg=cfg)
    assert a.phi == pytest.approx(b.phi, abs=1e-6)
    assert np.allclose(a.adjusted_betahat, b.adjusted_betahat, atol=1e-6)
    assert np.allclose(posterior_summaries(rm, fa, a).lfdr, posterior_summaries(rm2, fa2, b).lfdr,
                       atol=1e-6)


def test_stronger_null_penalty_raises_pi0():
    bhat, shat, alpha = _make_effects(7)
    rm, fa = _make_model(bhat, shat, alpha)
    weak = fit_backwash(rm, fa, cfg=BackwashConfig(penalty=PenaltySpec(lambda0=1.0)))
    strong = fit_backwash(rm, fa, cfg=BackwashConfig(penalty=PenaltySpec(lambda0=50.0)))
    assert pi0(strong) >= pi0(weak) - 1e-8


def test_needs_a_factor():
    bhat, shat, _ = _make_effects(8)
    rm, fa = _make_model(bhat, shat, np.zeros((0, bhat.size)))
    with pytest.raises(ValueError, match="q >= 1"):
        fit_backwash(rm, fa)


def test_needs_normal_mixture():
    bhat, shat, alpha = _make_effects(9)
    rm, fa = _make_model(bhat, shat, alpha)
    with pytest.raises(ValueError, match="normal"):
        fit_backwash(rm, fa, default_grid(bhat, shat, "uniform"))


@pytest.mark.slow
def test_default_fit_converges_on_confounded_study():
    study = simulate(SimulationConfig(n=40, p=1000, pi0=0.9, uv_rank=2, seed=5))
    rm = rotate(validate_dataset(study.Y, study.design(), 2))
    fa = truncated_pca(rm.Y3, 2)
    fit = fit_backwash(rm, fa)
    assert fit.converged
    assert fit.n_iters < 1000
    assert np.all(np.diff(fit.elbo_trace) >= -1e-8 * np.maximum(1.0, np.abs(fit.elbo_trace[:-1])))
