"""Factor analysis of the rotated residual block, variance moderation,
and the control-gene t-likelihood EM for (z, ξ).

Loadings α̂ are identified only up to their rowspace; everything downstream
depends on α̂ through its rowspace alone.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import optimize, special, stats

from mixture_prior import objective_converged

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
XI_FLOOR = 1e-12
TEM_REL_TOL = 1e-8
TEM_MAX_ITERS = 1000


class QTooLarge(ValueError):
    """Raised when q leaves no residual degrees of freedom."""


class SingularWeightedGram(np.linalg.LinAlgError):
    """Raised when α W αᵀ cannot be inverted."""


@dataclass(frozen=True)
class FactorEstimate:
    alpha: np.ndarray  # q × p
    sigma2: np.ndarray  # p
    q: int
    df: int  # n − k − q
    scores: np.ndarray | None = field(default=None, repr=False)  # Z̃₃, (n − k) × q


@dataclass(frozen=True)
class ControlGeneFit:
    z: np.ndarray
    xi: float
    trace: np.ndarray
    converged: bool
    xi_at_floor: bool = False


@dataclass(frozen=True)
class ControlAdjusted:
    adjusted_betahat: np.ndarray
    adjusted_se: np.ndarray
    fit: ControlGeneFit


# --- Factor analysis ---

def _floor_variances(sigma2: np.ndarray) -> np.ndarray:
    positive = sigma2[sigma2 > 0]
    floor = VARIANCE_FLOOR * (np.median(sigma2) if np.median(sigma2) > 0 else
                              (positive.min() if positive.size else 1.0))
    degenerate = sigma2 <= floor
    if degenerate.any():
        logger.warning("Floored %d degenerate residual variance(s) at %.3g",
                       int(degenerate.sum()), floor)
    return np.maximum(sigma2, floor)


def truncated_pca(Y3, q: int) -> FactorEstimate:
    """Rank-q SVD factorisation Ỹ₃ ≈ Z̃₃α̂ with Z̃₃ = √m·U_q, α̂ = D_q V_qᵀ/√m.

    σ̂ⱼ² is the residual sum of squares of column j over m − q, m = n − k.
    q = 0 passes through with σ̂ⱼ² the column mean square.
    """
    Y3 = np.asarray(Y3, dtype=float)
    m, p = Y3.shape
    if not np.all(np.isfinite(Y3)):
        raise ValueError("Y3 contains non-finite entries")
    if q < 0 or (q > 0 and q > min(m, p) - 1):
        raise QTooLarge(f"q = {q} must satisfy 0 <= q <= min(n - k, p) - 1 = {min(m, p) - 1}")
    if q == 0:
        if m < 1:
            raise QTooLarge("No residual rows for variance estimation")
        sigma2 = _floor_variances(np.mean(Y3**2, axis=0))
        return FactorEstimate(alpha=np.zeros((0, p)), sigma2=sigma2, q=0, df=m,
                              scores=np.zeros((m, 0)))

    if m <= p:
        U, d, Vt = scipy.linalg.svd(Y3, full_matrices=False)
    else:
        V, d, Ut = scipy.linalg.svd(Y3.T, full_matrices=False)
        U, Vt = Ut.T, V.T
    scores = np.sqrt(m) * U[:, :q]
    alpha = d[:q, None] * Vt[:q] / np.sqrt(m)
    resid = Y3 - scores @ alpha
    sigma2 = _floor_variances(np.sum(resid**2, axis=0) / (m - q))
    logger.debug("Truncated PCA: q=%d, leading singular values %s", q, d[:q])
    return FactorEstimate(alpha=alpha, sigma2=sigma2, q=q, df=m - q, scores=scores)


# --- Variance moderation ---

def _trigamma_inverse(x: float) -> float:
    """Solve trigamma(y) = x for y > 0."""
    return float(np.exp(optimize.brentq(
        lambda ly: special.polygamma(1, np.exp(ly)) - x, -30.0, 30.0, xtol=1e-14,
    )))


def fit_variance_prior(sigma2, df: int) -> tuple[float, float]:
    """Moment-match log σ̂ⱼ² to a scaled inverse-χ² prior; returns (d₀, s₀²).

    d₀ = 0 signals that the moments carry no evidence of a common prior.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if np.any(sigma2 <= 0):
        raise ValueError("Variances must be positive")
    e = np.log(sigma2) - special.digamma(df / 2) + np.log(df / 2)
    emean = float(np.mean(e))
    evar = float(np.var(e, ddof=1) - special.polygamma(1, df / 2)) if e.size > 1 else 0.0
    if evar <= 0:
        return 0.0, float(np.exp(emean))
    d0 = 2 * _trigamma_inverse(evar)
    s02 = float(np.exp(emean + special.digamma(d0 / 2) - np.log(d0 / 2)))
    return d0, s02


def squeeze_variances(sigma2, df: int, d0: float, s02: float) -> np.ndarray:
    """Posterior variances (d₀s₀² + df·σ̂ⱼ²)/(d₀ + df); d₀ = inf returns s₀²."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.isinf(d0):
        return np.full_like(sigma2, s02)
    return (d0 * s02 + df * sigma2) / (d0 + df)


def moderate_variances(sigma2, df: int) -> np.ndarray:
    """Empirical-Bayes shrinkage of residual variances toward a pooled value."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.ptp(sigma2) == 0:
        logger.info("All variances equal; nothing to moderate")
        return sigma2.copy()
    d0, s02 = fit_variance_prior(sigma2, df)
    if d0 <= 0:
        logger.info("Variance prior not identified (d0 <= 0); skipping moderation")
        return sigma2.copy()
    logger.debug("Variance prior: d0=%.4g, s0^2=%.4g", d0, s02)
    return squeeze_variances(sigma2, df, d0, s02)


# --- Control genes ---

def weighted_gls(alpha: np.ndarray, weights: np.ndarray, y: np.ndarray) -> np.ndarray:
    """z = (α W αᵀ)⁻¹ α W y for diagonal weights W."""
    gram = (alpha * weights) @ alpha.T
    rhs = (alpha * weights) @ y
    try:
        cho = scipy.linalg.cho_factor(gram, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise SingularWeightedGram(f"Weighted Gram matrix is not invertible: {e}") from e
    if np.linalg.cond(gram) > 1e14:
        raise SingularWeightedGram("Weighted Gram matrix is numerically singular")
    return scipy.linalg.cho_solve(cho, rhs)


def _t_loglik(bhat, alpha, s2, nu, z, xi) -> float:
    scale = np.sqrt(xi * s2)
    return float(np.sum(stats.t.logpdf(bhat, df=nu, loc=alpha.T @ z, scale=scale)))


def control_gene_tem(bhat_C, alpha_C, s2_C, nu, init_z, init_xi: float = 1.0,
                     max_iters: int = TEM_MAX_ITERS, rel_tol: float = TEM_REL_TOL) -> ControlGeneFit:
    """EM for β̂_C ~ t_ν(α̂_Cᵀz, ξ s_C²) via the inverse-gamma scale mixture.

    E-step: wⱼ = (νⱼ+1)/((β̂ⱼ − α̂ⱼᵀz)²/(ξsⱼ²) + νⱼ).
    M-step: weighted GLS for z, then ξ = mean(wⱼ rⱼ²/sⱼ²).
    """
    bhat = np.asarray(bhat_C, dtype=float)
    alpha = np.atleast_2d(np.asarray(alpha_C, dtype=float))
    s2 = np.asarray(s2_C, dtype=float)
    nu = np.broadcast_to(np.asarray(nu, dtype=float), bhat.shape)
    q, m = alpha.shape
    if m != bhat.size:
        raise ValueError(f"alpha_C has {m} columns for {bhat.size} control genes")
    if m < q + 1:
        raise ValueError(f"Need at least q + 1 = {q + 1} control genes, got {m}")
    if np.any(s2 <= 0) or np.any(nu <= 0):
        raise ValueError("s2_C and nu must be positive")

    z = np.asarray(init_z, dtype=float).copy()
    xi = float(init_xi)
    trace = [_t_loglik(bhat, alpha, s2, nu, z, xi)]
    converged = False
    at_floor = False
    for _ in range(max_iters):
        r = bhat - alpha.T @ z
        w = (nu + 1) / (r**2 / (xi * s2) + nu)
        if q:
            z = weighted_gls(alpha, w / s2, bhat)
        r = bhat - alpha.T @ z
        xi = float(np.mean(w * r**2 / s2))
        if xi <= XI_FLOOR:
            xi = XI_FLOOR
            if not at_floor:
                logger.warning("Control-gene residuals vanish; xi held at floor %g", XI_FLOOR)
            at_floor = True
        trace.append(_t_loglik(bhat, alpha, s2, nu, z, xi))
        if objective_converged(trace[-2], trace[-1], rel_tol):
            converged = True
            break
    logger.debug("Control-gene EM: %d iterations, xi=%.4g", len(trace) - 1, xi)
    return ControlGeneFit(z=z, xi=xi, trace=np.array(trace), converged=converged,
                          xi_at_floor=at_floor)


def control_gene_adjust(betahat, shat, alpha, controls, nu) -> ControlAdjusted:
    """Estimate (z, ξ) from control genes, then adjust every gene.

    β̂′ = β̂ − α̂ᵀẑ and ŝ′ = √ξ̂·ŝ.
    """
    betahat = np.asarray(betahat, dtype=float)
    shat = np.asarray(shat, dtype=float)
    controls = np.asarray(controls, dtype=int)
    s2 = shat**2
    alpha_C = alpha[:, controls]
    if alpha.shape[0] == 0:
        z0 = np.zeros(0)
    else:
        z0 = weighted_gls(alpha_C, 1.0 / s2[controls], betahat[controls])
    fit = control_gene_tem(betahat[controls], alpha_C, s2[controls], nu, z0, 1.0)
    return ControlAdjusted(
        adjusted_betahat=betahat - alpha.T @ fit.z,
        adjusted_se=np.sqrt(fit.xi) * shat,
        fit=fit,
    )
