"""BACKWASH: g-prior on the confounders, fitted by variational EM.

The confounder term α̂ᵀz gets the prior z ~ N(0, φ²(α̂α̂ᵀ)⁻¹), written as
φAv with A = α̂ᵀ(α̂α̂ᵀ)^(−1/2) (orthonormal columns) and v ~ N(0, I_q).
The variational family is q(v) = N(μ_v, Σ_v) times, per gene, a mixture
over components with weights γ_jm and normal densities N(μ_jm, σ_jm²)
(the point mass for m = 0). Every update below maximises the ELBO in its
own block, so the ELBO never decreases. Each sweep iterates the confounder
block (q(v), φ, ξ) to a fixed point, including a rescaling move that trades
scale between φ and q(v).
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from pydantic import BaseModel, Field
from scipy import special

from factor_analysis import FactorEstimate, weighted_gls
from mixture_prior import (
    PenaltySpec, UnimodalMixture, default_grid, log_component_densities, objective_converged,
    responsibilities,
)
from mouthwash import fit_normal_means
from rotation import RotatedModel, ols_standard_errors

logger = logging.getLogger(__name__)

REL_TOL = 1e-8
MAX_ITERS = 1000
EIGEN_FLOOR = 1e-10
JITTER = 1e-12
XI_FLOOR = 1e-12
INNER_MAX_ITERS = 200
INNER_TOL = 1e-10


class BackwashConfig(BaseModel):
    penalty: PenaltySpec = Field(default_factory=PenaltySpec)
    max_iters: int = Field(MAX_ITERS, ge=1)
    rel_tol: float = Field(REL_TOL, gt=0)
    fixed_phi: float | None = None
    fixed_xi: float | None = Field(None, gt=0)


@dataclass(frozen=True)
class BackwashState:
    A: np.ndarray  # p × q
    mu_v: np.ndarray
    Sigma_v: np.ndarray
    mu: np.ndarray  # p × (M+1), column 0 is zero
    sigma2: np.ndarray  # p × (M+1), column 0 is zero
    gamma: np.ndarray  # p × (M+1)
    pi: np.ndarray
    phi: float
    xi: float
    tau2: np.ndarray
    elbo_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jitter_added: bool = False

    def posterior_mean(self) -> np.ndarray:
        return np.sum(self.gamma * self.mu, axis=1)

    def posterior_second_moment(self) -> np.ndarray:
        return np.sum(self.gamma * (self.mu**2 + self.sigma2), axis=1)


@dataclass(frozen=True)
class BackwashFit:
    g_hat: UnimodalMixture
    state: BackwashState
    converged: bool
    n_iters: int
    bhat: np.ndarray
    shat: np.ndarray

    @property
    def elbo_trace(self) -> np.ndarray:
        return self.state.elbo_trace

    @property
    def phi(self) -> float:
        return self.state.phi

    @property
    def xi_hat(self) -> float:
        return self.state.xi

    @property
    def jitter_added(self) -> bool:
        return self.state.jitter_added

    @property
    def adjusted_betahat(self) -> np.ndarray:
        """β̂ − φAμ_v."""
        return self.bhat - self.state.phi * self.state.A @ self.state.mu_v


def loading_basis(alpha: np.ndarray) -> np.ndarray:
    """A = α̂ᵀ(α̂α̂ᵀ)^(−1/2) via a floored symmetric eigendecomposition."""
    w, V = scipy.linalg.eigh(alpha @ alpha.T)
    floor = EIGEN_FLOOR * max(w.max(), 0.0)
    if floor == 0:
        raise ValueError("Loadings are identically zero")
    if np.any(w < floor):
        logger.warning("Floored %d small eigenvalue(s) of the loading Gram matrix", int(np.sum(w < floor)))
    w = np.maximum(w, floor)
    return alpha.T @ (V / np.sqrt(w)) @ V.T


# --- Block updates ---

def _update_beta(state: BackwashState, bhat, s2, mix: UnimodalMixture):
    """Per-gene conjugate update given r = β̂ − φAμ_v."""
    r = bhat - state.phi * state.A @ state.mu_v
    v = state.xi * s2
    tau2 = mix.tau**2
    sigma2 = np.zeros((bhat.size, tau2.size))
    sigma2[:, 1:] = v[:, None] * tau2[None, 1:] / (v[:, None] + tau2[None, 1:])
    mu = sigma2 * (r / v)[:, None]
    gamma = responsibilities(log_component_densities(mix, r, np.sqrt(v)), state.pi)
    return replace(state, mu=mu, sigma2=sigma2, gamma=gamma)


def _update_pi(state: BackwashState, lam: np.ndarray) -> BackwashState:
    counts = state.gamma.sum(axis=0) + lam - 1
    return replace(state, pi=counts / counts.sum())


def _update_v(state: BackwashState, bhat, s2) -> BackwashState:
    A, phi, xi = state.A, state.phi, state.xi
    q = A.shape[1]
    precision = np.eye(q) + (phi**2 / xi) * (A.T / s2) @ A
    jitter = state.jitter_added
    try:
        cho = scipy.linalg.cho_factor(precision)
    except np.linalg.LinAlgError:
        logger.warning("Sigma_v precision not positive definite; adding jitter %g", JITTER)
        cho = scipy.linalg.cho_factor(precision + JITTER * np.eye(q))
        jitter = True
    Sigma_v = scipy.linalg.cho_solve(cho, np.eye(q))
    Sigma_v = 0.5 * (Sigma_v + Sigma_v.T)
    mu_v = (phi / xi) * Sigma_v @ (A.T @ ((bhat - state.posterior_mean()) / s2))
    return replace(state, mu_v=mu_v, Sigma_v=Sigma_v, jitter_added=jitter)


def _confounder_moments(state: BackwashState):
    av = state.A @ state.mu_v
    quad = np.einsum("jk,kl,jl->j", state.A, state.Sigma_v, state.A)
    return av, quad


def _update_phi(state: BackwashState, bhat, s2) -> BackwashState:
    av, quad = _confounder_moments(state)
    num = np.sum((bhat - state.posterior_mean()) * av / s2)
    den = np.sum((av**2 + quad) / s2)
    return replace(state, phi=float(num / den))


def _expected_sq_resid(state: BackwashState, bhat) -> np.ndarray:
    """E_q[(β̂ⱼ − βⱼ − φaⱼᵀv)²]."""
    m = state.posterior_mean()
    av, quad = _confounder_moments(state)
    var_beta = np.maximum(state.posterior_second_moment() - m**2, 0.0)
    return (bhat - m - state.phi * av) ** 2 + var_beta + state.phi**2 * quad


def _update_xi(state: BackwashState, bhat, s2) -> BackwashState:
    xi = float(np.mean(_expected_sq_resid(state, bhat) / s2))
    return replace(state, xi=max(xi, XI_FLOOR))


def _rescale_v(state: BackwashState) -> BackwashState:
    """Move scale between φ and q(v) along (φ/c, cμ_v, c²Σ_v).

    The likelihood terms are unchanged along that path and the KL term of
    q(v) is maximised at c² = q / (tr Σ_v + μ_vᵀμ_v).
    """
    size = float(np.trace(state.Sigma_v) + state.mu_v @ state.mu_v)
    if size <= 0:
        return state
    c = math.sqrt(state.mu_v.size / size)
    return replace(state, mu_v=c * state.mu_v, Sigma_v=c**2 * state.Sigma_v, phi=state.phi / c)


def _update_confounders(state: BackwashState, bhat, s2, cfg: BackwashConfig) -> BackwashState:
    """q(v), φ and ξ to a joint fixed point with q(β) held fixed."""
    for _ in range(INNER_MAX_ITERS):
        before = state
        state = _update_v(state, bhat, s2)
        if cfg.fixed_phi is None:
            state = _update_phi(state, bhat, s2)
            state = _rescale_v(state)
        if cfg.fixed_xi is None:
            state = _update_xi(state, bhat, s2)
        step = max(abs(state.phi - before.phi), abs(state.xi - before.xi) / state.xi,
                   float(np.max(np.abs(state.mu_v - before.mu_v))))
        if step <= INNER_TOL:
            break
    return state


def vem_sweep(state: BackwashState, bhat, s2, mix: UnimodalMixture, cfg: BackwashConfig) -> BackwashState:
    """One pass: q(β), π, then the confounder block (q(v), φ, ξ)."""
    state = _update_beta(state, bhat, s2, mix)
    state = _update_pi(state, cfg.penalty.vector(mix.n_components))
    return _update_confounders(state, bhat, s2, cfg)


# --- ELBO ---

def elbo(state: BackwashState, bhat, s2, penalty: PenaltySpec | None = None) -> float:
    """Penalised evidence lower bound, constants included."""
    bhat = np.asarray(bhat, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    v = state.xi * s2
    loglik = float(np.sum(-0.5 * np.log(2 * math.pi * v) - _expected_sq_resid(state, bhat) / (2 * v)))

    g, mu, sig2, tau2 = state.gamma, state.mu, state.sigma2, state.tau2
    # components whose weight underflowed to 0 carry no mass in q(β)
    live = state.pi > 0
    assign = float(np.sum(special.xlogy(g[:, live], state.pi[None, live])) - np.sum(special.xlogy(g, g)))
    slab = 0.0
    if tau2.size > 1:
        gs, ms, ss, ts = g[:, 1:], mu[:, 1:], sig2[:, 1:], tau2[None, 1:]
        slab = float(np.sum(gs * (0.5 * np.log(ss / ts) + 0.5 - (ms**2 + ss) / (2 * ts))))

    q = state.mu_v.size
    _, logdet = np.linalg.slogdet(state.Sigma_v)
    v_term = 0.5 * (q + logdet - np.trace(state.Sigma_v) - state.mu_v @ state.mu_v)

    pen = 0.0
    if penalty is not None:
        lam = penalty.vector(state.pi.size)
        with np.errstate(divide="ignore"):
            pen = float(np.sum(special.xlogy(lam - 1, state.pi)))
    return loglik + assign + slab + v_term + pen


# --- Drivers ---

def _effects(rm: RotatedModel, fa: FactorEstimate):
    if fa.q < 1:
        raise ValueError("BACKWASH needs at least one factor (q >= 1)")
    return rm.betahat, ols_standard_errors(rm, fa.sigma2), fa.alpha / rm.r22


def _check_mixture(mix: UnimodalMixture) -> None:
    if mix.kind != "normal":
        raise ValueError(f"BACKWASH supports only the normal mixture kind, got {mix.kind!r}")


def _init(bhat, shat, alpha, mix: UnimodalMixture, cfg: BackwashConfig) -> BackwashState:
    s2 = shat**2
    A = loading_basis(alpha)
    eb = fit_normal_means(bhat, shat, mix, cfg.penalty)
    tau2 = mix.tau**2
    shrink = tau2[None, :] / (s2[:, None] + tau2[None, :])
    mu_beta = np.sum(eb.responsibilities * shrink * bhat[:, None], axis=1)

    mu_v = weighted_gls(A.T, 1.0 / s2, bhat - mu_beta)
    phi = 1.0 if cfg.fixed_phi is None else cfg.fixed_phi
    xi = 1.0 if cfg.fixed_xi is None else cfg.fixed_xi
    q = A.shape[1]
    Sigma_v = np.linalg.inv(np.eye(q) + (phi**2 / xi) * (A.T / s2) @ A)
    k = mix.n_components
    state = BackwashState(
        A=A, mu_v=mu_v, Sigma_v=0.5 * (Sigma_v + Sigma_v.T),
        mu=np.zeros((bhat.size, k)), sigma2=np.zeros((bhat.size, k)), gamma=np.zeros((bhat.size, k)),
        pi=mix.pi.copy(), phi=phi, xi=xi, tau2=tau2,
    )
    return _update_beta(state, bhat, s2, mix)


def backwash_init(rm: RotatedModel, fa: FactorEstimate, mix: UnimodalMixture | None = None,
                  cfg: BackwashConfig | None = None) -> BackwashState:
    """μ_β from the no-confounder fit, μ_v by GLS of β̂ − μ_β on A, ξ = φ = 1."""
    cfg = cfg or BackwashConfig()
    bhat, shat, alpha = _effects(rm, fa)
    mix = mix if mix is not None else default_grid(bhat, shat, "normal")
    _check_mixture(mix)
    return _init(bhat, shat, alpha, mix, cfg)


def fit_backwash(rm: RotatedModel, fa: FactorEstimate, mix: UnimodalMixture | None = None,
                 cfg: BackwashConfig | None = None) -> BackwashFit:
    cfg = cfg or BackwashConfig()
    bhat, shat, alpha = _effects(rm, fa)
    mix = mix if mix is not None else default_grid(bhat, shat, "normal")
    _check_mixture(mix)
    s2 = shat**2

    state = _init(bhat, shat, alpha, mix, cfg)
    trace = [elbo(state, bhat, s2, cfg.penalty)]
    converged = False
    n_iters = 0
    for n_iters in range(1, cfg.max_iters + 1):
        state = vem_sweep(state, bhat, s2, mix, cfg)
        trace.append(elbo(state, bhat, s2, cfg.penalty))
        logger.debug("VEM sweep %d: elbo %.10g, phi %.4g, xi %.4g", n_iters, trace[-1], state.phi, state.xi)
        if objective_converged(trace[-2], trace[-1], cfg.rel_tol):
            converged = True
            break
    if not converged:
        logger.warning("BACKWASH did not converge in %d sweeps", cfg.max_iters)

    state = replace(state, elbo_trace=np.array(trace))
    logger.info("BACKWASH fit: q=%d, %d sweeps, pi0=%.4f, phi=%.4g, xi=%.4g",
                fa.q, n_iters, state.pi[0], state.phi, state.xi)
    return BackwashFit(g_hat=mix.with_pi(state.pi), state=state, converged=converged,
                       n_iters=n_iters, bhat=bhat, shat=shat)
