"""QR rotation of the regression into nuisance, interest and residual blocks.

With X = QR (covariate of interest last), QᵀY splits into
  Ỹ₁ (first k−1 rows) : carries the nuisance effects, ignored downstream,
  ỹ₂ (row k)         : r₂₂·β + z̃₂ᵀα + noise, giving β̂ = ỹ₂ / r₂₂,
  Ỹ₃ (last n−k rows) : Z̃₃α + noise, the factor-analysis input.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from data_model import ExpressionDataset


class NonPositiveVariance(ValueError):
    """Raised when a residual variance is zero, negative or non-finite."""


@dataclass(frozen=True)
class RotatedModel:
    r22: float
    y2: np.ndarray
    Y3: np.ndarray
    betahat: np.ndarray
    xtx_inv_diag: float
    R11: np.ndarray = field(repr=False)
    r12: np.ndarray = field(repr=False)
    Y1: np.ndarray = field(repr=False)
    gene_names: tuple[str, ...] | None = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.y2.size

    @property
    def df(self) -> int:
        """Rows available to factor analysis (n − k)."""
        return self.Y3.shape[0]


def rotate(ds: ExpressionDataset) -> RotatedModel:
    """Householder QR rotation of (Y, X) with diag(R₁) forced nonnegative."""
    X = ds.design_interest_last()
    k = X.shape[1]
    Q, R = scipy.linalg.qr(X, mode="full")
    signs = np.sign(np.diag(R[:k]))
    signs[signs == 0] = 1.0
    Q[:, :k] *= signs
    R[:k] *= signs[:, None]

    rotated = Q.T @ ds.Y
    r22 = float(R[k - 1, k - 1])
    y2 = rotated[k - 1].copy()
    return RotatedModel(
        r22=r22,
        y2=y2,
        Y3=rotated[k:].copy(),
        betahat=y2 / r22,
        xtx_inv_diag=1.0 / r22**2,
        R11=R[: k - 1, : k - 1].copy(),
        r12=R[: k - 1, k - 1].copy(),
        Y1=rotated[: k - 1].copy(),
        gene_names=ds.gene_names,
    )


def ols_standard_errors(rm: RotatedModel, sigma2) -> np.ndarray:
    """Standard errors ŝⱼ with ŝⱼ² = σ̂ⱼ² / r₂₂²."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if sigma2.shape != (rm.p,):
        raise ValueError(f"sigma2 must have length {rm.p}, got shape {sigma2.shape}")
    if not np.all(np.isfinite(sigma2)) or np.any(sigma2 <= 0):
        raise NonPositiveVariance("All residual variances must be finite and positive")
    return np.sqrt(sigma2 * rm.xtx_inv_diag)
