"""MOUTHWASH: joint maximum marginal likelihood over (g, z, ξ).

The observed effects follow β̂ⱼ = βⱼ + α̂ⱼᵀz + eⱼ with βⱼ ~ g and
eⱼ ~ N(0, ξŝⱼ²) (or t_ν). Normal-kind priors are fitted by EM; uniform
kinds by coordinate ascent with quasi-Newton z-steps. Both leave the
penalised objective nondecreasing every sweep.
"""

import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import optimize

from factor_analysis import FactorEstimate, weighted_gls
from mixture_prior import (
    Likelihood, MixtureKind, PenaltySpec, ScaledProblem, UnimodalMixture,
    center_derivatives, check_likelihood, default_grid, log_component_densities,
    mixture_loglik, objective_converged, penalized_log_objective, responsibilities, scale_by_se,
    solve_mixture_weights,
)
from rotation import RotatedModel, ols_standard_errors
from utils import derive_rng

logger = logging.getLogger(__name__)

REL_TOL = 1e-8
MAX_ITERS = 1000
INNER_ITERS = 10
XI_BOUNDS = (1e-3, 1e3)
BFGS_MAX_ITERS = 50

# sub-stream keys for derive_rng
_SUBSAMPLE_KEY = 11
_START_KEY = 12


class SubsampleTooSmall(ValueError):
    """Raised when the subsample has fewer than 10·q genes."""


class MouthwashConfig(BaseModel):
    mixture: MixtureKind = "normal"
    likelihood: Literal["normal", "t"] = "normal"
    nu: float | None = Field(None, gt=0)
    gamma: Literal[0, 1] = 0
    penalty: PenaltySpec = Field(default_factory=PenaltySpec)
    estimate_xi: bool = True
    fixed_xi: float = Field(1.0, gt=0)
    max_iters: int = Field(MAX_ITERS, ge=1)
    rel_tol: float = Field(REL_TOL, gt=0)
    subsample: int | None = Field(None, gt=0)
    n_starts: int = Field(1, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_likelihood(self) -> "MouthwashConfig":
        if self.likelihood == "t":
            if self.nu is None:
                raise ValueError("t likelihood needs nu")
            check_likelihood(self.mixture, Likelihood(self.nu))
        return self

    @property
    def noise(self) -> Likelihood:
        return Likelihood(self.nu) if self.likelihood == "t" else Likelihood()


@dataclass(frozen=True)
class MouthwashProblem:
    """Working-scale data plus everything held fixed during a fit."""

    x: np.ndarray
    s: np.ndarray
    alpha: np.ndarray  # q × p
    grid: UnimodalMixture
    likelihood: Likelihood
    penalty: PenaltySpec
    estimate_xi: bool

    @property
    def lam(self) -> np.ndarray:
        return self.penalty.vector(self.grid.n_components)


@dataclass(frozen=True)
class MouthwashState:
    pi: np.ndarray
    z: np.ndarray
    xi: float
    line_search_failed: bool = False


@dataclass(frozen=True)
class MouthwashFit:
    g_hat: UnimodalMixture
    z_hat: np.ndarray
    xi_hat: float
    objective_trace: np.ndarray
    responsibilities: np.ndarray
    converged: bool
    loglik: float
    n_iters: int
    line_search_failed: bool
    likelihood: Likelihood
    scaled: ScaledProblem
    bhat: np.ndarray
    shat: np.ndarray

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1])


# --- Objective ---

def _log_comp(problem: MouthwashProblem, z, xi) -> np.ndarray:
    resid = problem.x - problem.alpha.T @ z
    return log_component_densities(problem.grid, resid, math.sqrt(xi) * problem.s, problem.likelihood)


def marginal_loglik(problem: MouthwashProblem, state: MouthwashState) -> float:
    return mixture_loglik(_log_comp(problem, state.z, state.xi), state.pi)


def objective(problem: MouthwashProblem, state: MouthwashState) -> float:
    """Penalised log marginal likelihood at `state`."""
    return penalized_log_objective(
        problem.grid.with_pi(state.pi), problem.penalty, marginal_loglik(problem, state), state.xi,
    )


def loglik_gradient(problem: MouthwashProblem, pi, z, xi) -> np.ndarray:
    """∂/∂z of the marginal log-likelihood."""
    resid = problem.x - problem.alpha.T @ z
    noise = math.sqrt(xi) * problem.s
    log_comp = log_component_densities(problem.grid, resid, noise, problem.likelihood)
    w = responsibilities(log_comp, pi)
    dcenter = np.sum(w * center_derivatives(problem.grid, resid, noise, problem.likelihood), axis=1)
    return problem.alpha @ dcenter


def initial_state(problem: MouthwashProblem, pi=None, fixed_xi: float = 1.0) -> MouthwashState:
    """z₀ from GLS with weights 1/sⱼ², ξ₀ = 1 (or the fixed value)."""
    q = problem.alpha.shape[0]
    z0 = weighted_gls(problem.alpha, 1.0 / problem.s**2, problem.x) if q else np.zeros(0)
    return MouthwashState(
        pi=np.asarray(problem.grid.pi if pi is None else pi, dtype=float),
        z=z0,
        xi=1.0 if problem.estimate_xi else fixed_xi,
    )


# --- EM (normal kind) ---

def _expected_complete(problem: MouthwashProblem, Q: np.ndarray, resid: np.ndarray, xi: float) -> float:
    var = xi * problem.s[:, None] ** 2 + problem.grid.tau[None, :] ** 2
    ll = -0.5 * np.sum(Q * (np.log(var) + resid[:, None] ** 2 / var))
    return float(ll - problem.penalty.lambda_xi / xi)


def _maximize_xi(f, xi: float) -> float:
    """Bounded Brent on log ξ; keeps `xi` unless the search improves f."""
    lo, hi = map(math.log, XI_BOUNDS)
    res = optimize.minimize_scalar(lambda t: -f(math.exp(t)), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10})
    candidate = math.exp(res.x)
    return candidate if f(candidate) > f(xi) else xi


def em_normal_step(problem: MouthwashProblem, state: MouthwashState) -> MouthwashState:
    """One EM sweep: responsibilities, π, then a few z/ξ alternations."""
    s2 = problem.s**2
    tau2 = problem.grid.tau**2
    Q = responsibilities(_log_comp(problem, state.z, state.xi), state.pi)

    counts = Q.sum(axis=0) + problem.lam - 1
    pi = counts / counts.sum()

    z, xi = state.z, state.xi
    q = problem.alpha.shape[0]
    for _ in range(INNER_ITERS):
        z_old, xi_old = z, xi
        if q:
            theta = np.sum(Q / (xi * s2[:, None] + tau2[None, :]), axis=1)
            z = weighted_gls(problem.alpha, theta, problem.x)
        if problem.estimate_xi:
            resid = problem.x - problem.alpha.T @ z
            xi = _maximize_xi(lambda v: _expected_complete(problem, Q, resid, v), xi)
        if xi == xi_old and np.allclose(z, z_old, rtol=1e-12, atol=0):
            break
    return MouthwashState(pi=pi, z=z, xi=xi)


# --- Coordinate ascent (uniform kinds) ---

def coord_ascent_step(problem: MouthwashProblem, state: MouthwashState) -> MouthwashState:
    """One sweep: convex π-step, BFGS z-step, bounded Brent ξ-step."""
    pi, _ = solve_mixture_weights(_log_comp(problem, state.z, state.xi), problem.lam, init_pi=state.pi)
    z, xi = state.z, state.xi
    failed = False

    if problem.alpha.shape[0]:
        def neg_loglik(zv):
            return -mixture_loglik(_log_comp(problem, zv, xi), pi)

        def neg_grad(zv):
            return -loglik_gradient(problem, pi, zv, xi)

        res = optimize.minimize(neg_loglik, z, jac=neg_grad, method="BFGS",
                                options={"maxiter": BFGS_MAX_ITERS})
        if res.fun < neg_loglik(z):
            z = res.x
        elif not res.success:
            failed = True
            logger.warning("z line search failed (%s); keeping previous z", res.message)

    if problem.estimate_xi:
        def penalized(v):
            return mixture_loglik(_log_comp(problem, z, v), pi) - problem.penalty.lambda_xi / v

        xi = _maximize_xi(penalized, xi)
    return MouthwashState(pi=pi, z=z, xi=xi, line_search_failed=failed)


# --- Drivers ---

def _run(problem: MouthwashProblem, state: MouthwashState, cfg: MouthwashConfig):
    step = em_normal_step if problem.grid.kind == "normal" else coord_ascent_step
    trace = [objective(problem, state)]
    converged = False
    failed = False
    n_iters = 0
    for n_iters in range(1, cfg.max_iters + 1):
        state = step(problem, state)
        failed |= state.line_search_failed
        trace.append(objective(problem, state))
        logger.debug("sweep %d: objective %.10g, xi %.6g", n_iters, trace[-1], state.xi)
        if objective_converged(trace[-2], trace[-1], cfg.rel_tol):
            converged = True
            break
    if not converged:
        logger.warning("MOUTHWASH did not converge in %d sweeps", cfg.max_iters)
    return state, np.array(trace), converged, n_iters, failed


def _build_fit(problem, state, trace, converged, n_iters, failed, scaled, bhat, shat) -> MouthwashFit:
    log_comp = _log_comp(problem, state.z, state.xi)
    return MouthwashFit(
        g_hat=problem.grid.with_pi(state.pi),
        z_hat=state.z,
        xi_hat=state.xi,
        objective_trace=trace,
        responsibilities=responsibilities(log_comp, state.pi),
        converged=converged,
        loglik=mixture_loglik(log_comp, state.pi),
        n_iters=n_iters,
        line_search_failed=failed,
        likelihood=problem.likelihood,
        scaled=scaled,
        bhat=bhat,
        shat=shat,
    )


def _problem(scaled: ScaledProblem, grid: UnimodalMixture, cfg: MouthwashConfig) -> MouthwashProblem:
    if grid.kind != cfg.mixture:
        raise ValueError(f"Grid kind {grid.kind!r} does not match config mixture {cfg.mixture!r}")
    return MouthwashProblem(
        x=scaled.x, s=scaled.s, alpha=scaled.alpha, grid=grid, likelihood=cfg.noise,
        penalty=cfg.penalty, estimate_xi=cfg.estimate_xi,
    )


def fit_effects(bhat, shat, alpha, cfg: MouthwashConfig | None = None,
                mix: UnimodalMixture | None = None) -> MouthwashFit:
    """Fit on effect estimates, standard errors and β̂-scale loadings (q × p)."""
    cfg = cfg or MouthwashConfig()
    bhat = np.asarray(bhat, dtype=float)
    shat = np.asarray(shat, dtype=float)
    alpha = np.asarray(alpha, dtype=float).reshape(-1, bhat.size)
    scaled = scale_by_se(bhat, shat, alpha, cfg.gamma, cfg.estimate_xi, cfg.penalty)
    grid = mix if mix is not None else default_grid(scaled.x, scaled.s, cfg.mixture)
    problem = _problem(scaled, grid, cfg)

    best = None
    for start in range(cfg.n_starts):
        pi0 = None if start == 0 else derive_rng(cfg.seed, _START_KEY, start).dirichlet(
            np.ones(grid.n_components))
        result = _run(problem, initial_state(problem, pi0, cfg.fixed_xi), cfg)
        if best is None or result[1][-1] > best[1][-1]:
            best = result
    fit = _build_fit(problem, *best, scaled, bhat, shat)
    logger.info("MOUTHWASH fit: q=%d, %d sweeps, pi0=%.4f, xi=%.4g, converged=%s",
                alpha.shape[0], fit.n_iters, fit.g_hat.pi[0], fit.xi_hat, fit.converged)
    return fit


def fit_normal_means(bhat, shat, mix: UnimodalMixture | None = None,
                     penalty: PenaltySpec | None = None, kind: MixtureKind = "normal") -> MouthwashFit:
    """Plain empirical-Bayes shrinkage: no confounders, ξ fixed at 1."""
    cfg = MouthwashConfig(mixture=kind, penalty=penalty or PenaltySpec(), estimate_xi=False)
    return fit_effects(bhat, shat, np.zeros((0, np.size(bhat))), cfg, mix)


def fit_mouthwash(rm: RotatedModel, fa: FactorEstimate, cfg: MouthwashConfig | None = None,
                  mix: UnimodalMixture | None = None) -> MouthwashFit:
    cfg = cfg or MouthwashConfig()
    if cfg.subsample is not None and cfg.subsample < rm.p:
        return fit_mouthwash_subsampled(rm, fa, cfg, mix)
    shat = ols_standard_errors(rm, fa.sigma2)
    return fit_effects(rm.betahat, shat, fa.alpha / rm.r22, cfg, mix)


def fit_mouthwash_subsampled(rm: RotatedModel, fa: FactorEstimate, cfg: MouthwashConfig,
                             mix: UnimodalMixture | None = None) -> MouthwashFit:
    """Estimate (g, z, ξ) on a random gene subset, then re-solve π on all genes.

    The grid is built from all genes so both passes share it.
    """
    size = cfg.subsample
    if size is None:
        raise ValueError("subsample size is not set")
    if size < 10 * fa.q:
        raise SubsampleTooSmall(f"subsample of {size} genes is below 10·q = {10 * fa.q}")
    if size > rm.p:
        raise ValueError(f"subsample of {size} genes exceeds p = {rm.p}")

    bhat = rm.betahat
    shat = ols_standard_errors(rm, fa.sigma2)
    alpha = fa.alpha / rm.r22
    scaled = scale_by_se(bhat, shat, alpha, cfg.gamma, cfg.estimate_xi, cfg.penalty)
    grid = mix if mix is not None else default_grid(scaled.x, scaled.s, cfg.mixture)

    idx = np.sort(derive_rng(cfg.seed, _SUBSAMPLE_KEY).choice(rm.p, size=size, replace=False))
    sub = fit_effects(bhat[idx], shat[idx], alpha[:, idx], cfg.model_copy(update={"subsample": None}), grid)

    problem = _problem(scaled, grid, cfg)
    log_comp = _log_comp(problem, sub.z_hat, sub.xi_hat)
    pi, trace = solve_mixture_weights(log_comp, problem.lam, init_pi=sub.g_hat.pi)
    state = MouthwashState(pi=pi, z=sub.z_hat, xi=sub.xi_hat)
    logger.info("Subsampled MOUTHWASH: %d of %d genes, pi0=%.4f", size, rm.p, pi[0])
    return _build_fit(problem, state, trace - cfg.penalty.lambda_xi / sub.xi_hat, sub.converged,
                      sub.n_iters, sub.line_search_failed, scaled, bhat, shat)
