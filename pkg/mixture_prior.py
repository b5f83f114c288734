"""Unimodal mixture priors: grids, penalties and convolved densities.

A prior g is a point mass at zero (component 0) plus a fixed grid of
zero-centred components, either scale normals N(0, τ²) or uniforms U[a, b]
with a ≤ 0 ≤ b. Only the weights π are learned. Every density here is the
marginal of an observation x = β + e with β ~ component and e ~ likelihood
on scale s, i.e. the component convolved with the noise.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field
from scipy import special, stats

logger = logging.getLogger(__name__)

MixtureKind = Literal["normal", "uniform", "halfuniform"]
MIXTURE_KINDS: tuple[str, ...] = ("normal", "uniform", "halfuniform")

GRID_MULTIPLIER = math.sqrt(2.0)
WEIGHTS_REL_TOL = 1e-10
WEIGHTS_MAX_ITERS = 5000


class DegenerateComponent(ValueError):
    """Raised for a non-point-mass uniform component with zero width."""


class UnidentifiableConfig(ValueError):
    """Raised when ξ cannot be separated from g (γ = 1, ξ free, λ_ξ = 0)."""


class UnsupportedLikelihood(ValueError):
    """Raised for a t likelihood paired with scale-normal components."""


# --- Types ---

@dataclass(frozen=True)
class Likelihood:
    """Noise distribution on the standardised scale; nu = inf means normal."""

    nu: float = math.inf

    @property
    def is_normal(self) -> bool:
        return math.isinf(self.nu)

    def _dist(self):
        return stats.norm if self.is_normal else stats.t(df=self.nu)

    def logpdf(self, u):
        return self._dist().logpdf(u)

    def pdf(self, u):
        return self._dist().pdf(u)

    def logcdf(self, u):
        return self._dist().logcdf(u)

    def logsf(self, u):
        return self._dist().logsf(u)

    def dlogpdf(self, u):
        """d log f(u) / du."""
        u = np.asarray(u, dtype=float)
        if self.is_normal:
            return -u
        return -(self.nu + 1) * u / (self.nu + u**2)


@dataclass(frozen=True)
class UnimodalMixture:
    """Point mass plus a fixed grid of zero-centred components.

    For the normal kind only `tau` is used; for the uniform kinds only
    `lower`/`upper`. Component 0 is always the point mass (τ = 0, a = b = 0).
    """

    kind: str
    pi: np.ndarray
    tau: np.ndarray = field(default_factory=lambda: np.zeros(1))
    lower: np.ndarray = field(default_factory=lambda: np.zeros(1))
    upper: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        for name in ("pi", "tau", "lower", "upper"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.kind not in MIXTURE_KINDS:
            raise ValueError(f"Unknown mixture kind {self.kind!r}; expected one of {MIXTURE_KINDS}")
        k = self.pi.size
        if self.kind == "normal":
            if self.tau.shape != (k,) or self.tau[0] != 0 or np.any(self.tau[1:] <= 0):
                raise ValueError("Normal mixture needs tau[0] = 0 and positive tau elsewhere")
        else:
            if self.lower.shape != (k,) or self.upper.shape != (k,):
                raise ValueError("Uniform mixture needs lower/upper of the same length as pi")
            if self.lower[0] != 0 or self.upper[0] != 0:
                raise ValueError("Component 0 must be the point mass")
            if np.any(self.lower > 0) or np.any(self.upper < 0):
                raise ValueError("Every uniform component must contain 0")
            if np.any(self.upper[1:] - self.lower[1:] <= 0):
                raise DegenerateComponent("Uniform component with zero width")

    @property
    def n_components(self) -> int:
        return self.pi.size

    def with_pi(self, pi) -> "UnimodalMixture":
        return replace(self, pi=np.asarray(pi, dtype=float))

    def variance(self) -> float:
        """Second moment of g."""
        if self.kind == "normal":
            return float(self.pi @ self.tau**2)
        a, b = self.lower, self.upper
        return float(self.pi @ ((a**2 + a * b + b**2) / 3))

    def to_dict(self) -> dict:
        grid = ({"tau": self.tau.tolist()} if self.kind == "normal"
                else {"lower": self.lower.tolist(), "upper": self.upper.tolist()})
        return {"kind": self.kind, "pi": self.pi.tolist(), **grid}


class PenaltySpec(BaseModel):
    """Dirichlet-style exponents on π and the ξ penalty exp(−λ_ξ/ξ)."""

    lambda0: float = Field(10.0, ge=1.0)
    lambda_other: float = Field(1.0, ge=1.0)
    lambda_xi: float = Field(0.0, ge=0.0)

    def vector(self, n_components: int) -> np.ndarray:
        lam = np.full(n_components, self.lambda_other)
        lam[0] = self.lambda0
        return lam


@dataclass(frozen=True)
class ScaledProblem:
    """Working-scale data: x = β̂/ŝ^γ with noise scale s = ŝ^(1−γ)."""

    x: np.ndarray
    s: np.ndarray
    alpha: np.ndarray
    factor: np.ndarray  # ŝ^γ, multiplies working-scale effects back
    gamma: int


# --- Grid ---

def _initial_pi(n_components: int) -> np.ndarray:
    m = n_components - 1
    if m == 0:
        return np.ones(1)
    pi = np.full(n_components, 1.0 / (10 * m) / m)
    pi[0] = 1.0 - 1.0 / (10 * m)
    return pi


def default_grid(bhat, shat, kind: MixtureKind = "normal") -> UnimodalMixture:
    """Geometric grid from min(ŝ)/10 to 2·√max(β̂² − ŝ²), step at most √2."""
    bhat = np.asarray(bhat, dtype=float)
    shat = np.asarray(shat, dtype=float)
    if np.any(shat <= 0):
        raise ValueError("Standard errors must be positive")
    if kind not in MIXTURE_KINDS:
        raise ValueError(f"Unknown mixture kind {kind!r}")

    sigma_min = shat.min() / 10
    excess = np.max(bhat**2 - shat**2)
    if excess <= 0:
        sigma_max = 2 * shat.max()
        logger.info("No gene has |betahat| > sehat; using a single-component grid")
        scales = np.array([sigma_max])
    else:
        sigma_max = 2 * math.sqrt(excess)
        if sigma_max <= sigma_min:
            scales = np.array([sigma_max])
        else:
            n = math.ceil(math.log(sigma_max / sigma_min) / math.log(GRID_MULTIPLIER)) + 1
            scales = np.geomspace(sigma_min, sigma_max, n)

    if kind == "normal":
        return UnimodalMixture(kind=kind, pi=_initial_pi(scales.size + 1),
                               tau=np.concatenate([[0.0], scales]))
    if kind == "uniform":
        lower, upper = -scales, scales
    else:
        lower = np.concatenate([-scales, np.zeros_like(scales)])
        upper = np.concatenate([np.zeros_like(scales), scales])
    return UnimodalMixture(
        kind=kind, pi=_initial_pi(lower.size + 1),
        lower=np.concatenate([[0.0], lower]), upper=np.concatenate([[0.0], upper]),
    )


# --- Densities ---

def check_likelihood(kind: str, likelihood: Likelihood) -> None:
    if kind == "normal" and not likelihood.is_normal:
        raise UnsupportedLikelihood("t likelihood requires a uniform or half-uniform mixture")


def _log1mexp(d: np.ndarray) -> np.ndarray:
    """log(1 − exp(d)) for d ≤ 0."""
    d = np.minimum(d, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(d > -math.log(2), np.log(-np.expm1(d)), np.log1p(-np.exp(d)))


def log_cdf_diff(lik: Likelihood, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """log(F(u) − F(v)) for u > v, working in the tail that keeps precision."""
    u, v = np.broadcast_arrays(u, v)
    upper_tail = v > 0
    out = np.empty(u.shape)
    if upper_tail.any():
        su, sv = lik.logsf(u[upper_tail]), lik.logsf(v[upper_tail])
        out[upper_tail] = sv + _log1mexp(su - sv)
    lower = ~upper_tail
    if lower.any():
        cu, cv = lik.logcdf(u[lower]), lik.logcdf(v[lower])
        out[lower] = cu + _log1mexp(cv - cu)
    return out


def log_component_densities(mix: UnimodalMixture, resid, s, likelihood: Likelihood = Likelihood()) -> np.ndarray:
    """log f̃_jm, the density of resid_j under component m, as a p × (M+1) matrix.

    `resid` is x − center and `s` the per-gene noise scale (ξ already applied).
    """
    check_likelihood(mix.kind, likelihood)
    resid = np.asarray(resid, dtype=float)[:, None]
    s = np.broadcast_to(np.asarray(s, dtype=float), resid.shape[:1])[:, None]
    if np.any(s <= 0):
        raise ValueError("Noise scale must be positive")

    if mix.kind == "normal":
        return stats.norm.logpdf(resid, scale=np.sqrt(s**2 + mix.tau[None, :] ** 2))

    out = np.empty((resid.shape[0], mix.n_components))
    out[:, :1] = likelihood.logpdf(resid / s) - np.log(s)
    a, b = mix.lower[None, 1:], mix.upper[None, 1:]
    out[:, 1:] = log_cdf_diff(likelihood, (resid - a) / s, (resid - b) / s) - np.log(b - a)
    return out


def convolved_density(mix: UnimodalMixture, x, center, s2, likelihood: Likelihood = Likelihood()):
    """Per-component marginal densities of x and their π-weighted total."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s2 = np.broadcast_to(np.asarray(s2, dtype=float), x.shape)
    if np.any(s2 <= 0):
        raise ValueError("s2 must be positive")
    if not likelihood.is_normal and likelihood.nu <= 0:
        raise ValueError("nu must be positive")
    comp = np.exp(log_component_densities(mix, x - center, np.sqrt(s2), likelihood))
    total = comp @ mix.pi
    if comp.shape[0] == 1:
        return comp[0], float(total[0])
    return comp, total


def center_derivatives(mix: UnimodalMixture, resid, s, likelihood: Likelihood = Likelihood()) -> np.ndarray:
    """∂ log f̃_jm / ∂center per gene and component, with resid = x − center.

    Multiplying by the responsibilities and summing over m gives the
    per-gene derivative of the marginal log-likelihood.
    """
    check_likelihood(mix.kind, likelihood)
    resid = np.asarray(resid, dtype=float)[:, None]
    s = np.broadcast_to(np.asarray(s, dtype=float), resid.shape[:1])[:, None]

    if mix.kind == "normal":
        return resid / (s**2 + mix.tau[None, :] ** 2)

    out = np.empty((resid.shape[0], mix.n_components))
    out[:, :1] = -likelihood.dlogpdf(resid / s) / s
    a, b = mix.lower[None, 1:], mix.upper[None, 1:]
    u, v = (resid - a) / s, (resid - b) / s
    log_diff = log_cdf_diff(likelihood, u, v)
    # d/dcenter log(F(u) − F(v)) = −(f(u) − f(v)) / (s (F(u) − F(v)))
    out[:, 1:] = -(np.exp(likelihood.logpdf(u) - log_diff)
                   - np.exp(likelihood.logpdf(v) - log_diff)) / s
    return out


def _log_pi(pi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(pi)


def mixture_loglik(log_comp: np.ndarray, pi: np.ndarray) -> float:
    """Σⱼ log Σ_m π_m f̃_jm."""
    return float(np.sum(special.logsumexp(log_comp + _log_pi(pi)[None, :], axis=1)))


def responsibilities(log_comp: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Posterior component probabilities; rows sum to one."""
    return special.softmax(log_comp + _log_pi(pi)[None, :], axis=1)


# --- Objective ---

def penalized_log_objective(mix: UnimodalMixture, penalty: PenaltySpec, loglik: float, xi: float) -> float:
    """loglik + Σ(λ_m − 1) log π_m − λ_ξ/ξ; −inf when a penalised π_m is 0."""
    lam = penalty.vector(mix.n_components)
    with np.errstate(divide="ignore"):
        pen = float(np.sum(special.xlogy(lam - 1, mix.pi)))
    return loglik + pen - penalty.lambda_xi / xi


def scale_by_se(bhat, shat, alpha, gamma: int, estimate_xi: bool, penalty: PenaltySpec) -> ScaledProblem:
    """Model β̂ⱼ/ŝⱼ^γ with unit-free noise when γ = 1; identity when γ = 0."""
    bhat = np.asarray(bhat, dtype=float)
    shat = np.asarray(shat, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if gamma not in (0, 1):
        raise ValueError(f"gamma must be 0 or 1, got {gamma}")
    if gamma == 0:
        return ScaledProblem(x=bhat, s=shat, alpha=alpha, factor=np.ones_like(shat), gamma=0)
    if estimate_xi and penalty.lambda_xi <= 0:
        raise UnidentifiableConfig(
            "gamma = 1 with xi estimated needs lambda_xi > 0; otherwise xi and g are confounded"
        )
    return ScaledProblem(x=bhat / shat, s=np.ones_like(shat), alpha=alpha / shat[None, :],
                         factor=shat, gamma=1)


def objective_converged(previous: float, current: float, rel_tol: float) -> bool:
    """Relative-change stopping rule; a non-finite objective never counts as converged."""
    if not (math.isfinite(previous) and math.isfinite(current)):
        return False
    return abs(current - previous) <= rel_tol * max(1.0, abs(previous))


def solve_mixture_weights(log_lik, lam, init_pi=None, rel_tol: float = WEIGHTS_REL_TOL,
                          max_iters: int = WEIGHTS_MAX_ITERS) -> tuple[np.ndarray, np.ndarray]:
    """Maximise Σⱼ log Σ_m π_m L_jm + Σ(λ_m − 1) log π_m over the simplex.

    `log_lik` holds log L_jm. Fixed-point (EM) iterations are monotone for
    λ ≥ 1. Returns the weights and the objective trace.
    """
    log_lik = np.asarray(log_lik, dtype=float)
    lam = np.asarray(lam, dtype=float)
    k = log_lik.shape[1]
    pi = np.full(k, 1.0 / k) if init_pi is None else np.asarray(init_pi, dtype=float).copy()

    def objective(w):
        with np.errstate(divide="ignore"):
            return mixture_loglik(log_lik, w) + float(np.sum(special.xlogy(lam - 1, w)))

    trace = [objective(pi)]
    for _ in range(max_iters):
        counts = responsibilities(log_lik, pi).sum(axis=0) + lam - 1
        pi = counts / counts.sum()
        trace.append(objective(pi))
        if objective_converged(trace[-2], trace[-1], rel_tol):
            break
    else:
        logger.warning("Mixture weights did not converge in %d iterations", max_iters)
    return pi, np.array(trace)
