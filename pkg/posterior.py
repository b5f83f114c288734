"""Per-gene posterior summaries conditional on the fitted (ĝ, ẑ, ξ̂).

lfdr is the posterior weight on the point mass. lfsr counts the point mass
on both sides: lfsr = min(Pr(β ≥ 0), Pr(β ≤ 0)), so lfsr ≥ lfdr always.
"""

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import integrate, stats

from backwash import BackwashFit
from factor_analysis import FactorEstimate
from mixture_prior import Likelihood, log_cdf_diff, log_component_densities, responsibilities
from mouthwash import MouthwashFit
from rotation import RotatedModel

NEGLIGIBLE_WEIGHT = 1e-12
QUAD_REL_TOL = 1e-10

GENE_COLUMNS = [
    "gene", "betahat", "sebetahat", "adjusted_betahat", "post_mean", "post_sd",
    "lfdr", "lfsr", "qvalue_analog",
]


@dataclass(frozen=True)
class GeneSummaries:
    betahat: np.ndarray
    sebetahat: np.ndarray
    adjusted_betahat: np.ndarray
    post_mean: np.ndarray
    post_sd: np.ndarray
    lfdr: np.ndarray
    lfsr: np.ndarray
    qvalue_analog: np.ndarray
    genes: tuple[str, ...] | None = None

    def to_frame(self, gene_names=None) -> pd.DataFrame:
        names = gene_names if gene_names is not None else self.genes
        if names is None:
            names = [f"gene{j + 1}" for j in range(self.lfdr.size)]
        frame = pd.DataFrame({
            "gene": list(names),
            "betahat": self.betahat,
            "sebetahat": self.sebetahat,
            "adjusted_betahat": self.adjusted_betahat,
            "post_mean": self.post_mean,
            "post_sd": self.post_sd,
            "lfdr": self.lfdr,
            "lfsr": self.lfsr,
            "qvalue_analog": self.qvalue_analog,
        })
        return frame[GENE_COLUMNS]


def qvalue_analog(lfdr) -> np.ndarray:
    """Running mean of the sorted lfdr, mapped back to gene order."""
    lfdr = np.asarray(lfdr, dtype=float)
    order = np.argsort(lfdr, kind="stable")
    out = np.empty_like(lfdr)
    out[order] = np.cumsum(lfdr[order]) / np.arange(1, lfdr.size + 1)
    return out


# --- Component posteriors ---
# Each helper returns per-gene (mean, second moment, Pr(β > 0), Pr(β < 0))
# over the non-null components, weighted by gamma.

def _normal_components(resid, noise, tau, gamma):
    v = noise[:, None] ** 2
    tau2 = tau[None, 1:] ** 2
    var = v * tau2 / (v + tau2)
    mu = var * (resid / noise**2)[:, None]
    sd = np.sqrt(var)
    g = gamma[:, 1:]
    return (
        np.sum(g * mu, axis=1),
        np.sum(g * (mu**2 + var), axis=1),
        np.sum(g * stats.norm.cdf(mu / sd), axis=1),
        np.sum(g * stats.norm.cdf(-mu / sd), axis=1),
    )


def _truncnorm_components(resid, noise, lower, upper, gamma):
    p, k = gamma.shape
    mean = np.zeros((p, k - 1))
    second = np.zeros((p, k - 1))
    pos = np.zeros((p, k - 1))
    neg = np.zeros((p, k - 1))
    rows, cols = np.nonzero(gamma[:, 1:] >= NEGLIGIBLE_WEIGHT)
    if rows.size:
        loc, scale = resid[rows], noise[rows]
        a, b = lower[1:][cols], upper[1:][cols]
        dist = stats.truncnorm((a - loc) / scale, (b - loc) / scale, loc=loc, scale=scale)
        m, var = dist.mean(), dist.var()
        mean[rows, cols] = m
        second[rows, cols] = var + m**2
        pos[rows, cols] = dist.sf(0.0)
        neg[rows, cols] = dist.cdf(0.0)
    g = gamma[:, 1:]
    return (np.sum(g * mean, axis=1), np.sum(g * second, axis=1),
            np.sum(g * pos, axis=1), np.sum(g * neg, axis=1))


def _trunct_moments(lik: Likelihood, r: float, s: float, a: float, b: float):
    """Moments of β ∝ t_ν((r − β)/s) on [a, b], via u = (r − β)/s."""
    lo, hi = (r - b) / s, (r - a) / s
    log_z = float(log_cdf_diff(lik, np.array([hi]), np.array([lo]))[0])
    points = [0.0] if lo < 0 < hi else None

    def integral(power):
        value, _ = integrate.quad(lambda u: u**power * math.exp(float(lik.logpdf(u)) - log_z),
                                  lo, hi, points=points, epsabs=0.0, epsrel=QUAD_REL_TOL, limit=200)
        return value

    eu, eu2 = integral(1), integral(2)
    mean = r - s * eu
    second = r**2 - 2 * r * s * eu + s**2 * eu2
    c = min(max(r / s, lo), hi)  # β > 0 ⇔ u < r/s
    pos = math.exp(float(log_cdf_diff(lik, np.array([c]), np.array([lo]))[0]) - log_z) if c > lo else 0.0
    neg = math.exp(float(log_cdf_diff(lik, np.array([hi]), np.array([c]))[0]) - log_z) if hi > c else 0.0
    return mean, second, pos, neg


def _trunct_components(resid, noise, lower, upper, gamma, lik: Likelihood):
    p, k = gamma.shape
    out = np.zeros((4, p, k - 1))
    for j, m in zip(*np.nonzero(gamma[:, 1:] >= NEGLIGIBLE_WEIGHT)):
        out[:, j, m] = _trunct_moments(lik, resid[j], noise[j], lower[m + 1], upper[m + 1])
    g = gamma[:, 1:]
    return tuple(np.sum(g * out[i], axis=1) for i in range(4))


def _summaries(mix, resid, noise, lik: Likelihood, factor, betahat, sebetahat, genes) -> GeneSummaries:
    gamma = responsibilities(log_component_densities(mix, resid, noise, lik), mix.pi)
    if mix.kind == "normal":
        mean, second, pos, neg = _normal_components(resid, noise, mix.tau, gamma)
    elif lik.is_normal:
        mean, second, pos, neg = _truncnorm_components(resid, noise, mix.lower, mix.upper, gamma)
    else:
        mean, second, pos, neg = _trunct_components(resid, noise, mix.lower, mix.upper, gamma, lik)

    lfdr = gamma[:, 0]
    lfsr = np.clip(np.minimum(lfdr + pos, lfdr + neg), 0.0, 1.0)
    sd = np.sqrt(np.maximum(second - mean**2, 0.0))
    return GeneSummaries(
        betahat=betahat,
        sebetahat=sebetahat,
        adjusted_betahat=factor * resid,
        post_mean=factor * mean,
        post_sd=factor * sd,
        lfdr=lfdr,
        lfsr=lfsr,
        qvalue_analog=qvalue_analog(lfdr),
        genes=genes,
    )


def posterior_summaries(rm: RotatedModel | None, fa: FactorEstimate | None,
                        fit: MouthwashFit | BackwashFit) -> GeneSummaries:
    """Per-gene lfdr, lfsr, posterior mean/sd and confounder-adjusted effects."""
    genes = rm.gene_names if rm is not None else None
    if isinstance(fit, BackwashFit):
        resid = fit.adjusted_betahat
        noise = math.sqrt(fit.xi_hat) * fit.shat
        return _summaries(fit.g_hat, resid, noise, Likelihood(), np.ones_like(resid),
                          fit.bhat, fit.shat, genes)

    if fa is not None and fit.z_hat.size != fa.q:
        raise ValueError(f"Fit has {fit.z_hat.size} factors but the factor estimate has q = {fa.q}")
    sc = fit.scaled
    resid = sc.x - sc.alpha.T @ fit.z_hat
    noise = math.sqrt(fit.xi_hat) * sc.s
    return _summaries(fit.g_hat, resid, noise, fit.likelihood, sc.factor, fit.bhat, fit.shat, genes)


def pi0(fit: MouthwashFit | BackwashFit) -> float:
    """Fitted weight of the point mass."""
    return float(fit.g_hat.pi[0])
