"""Dataset types, validation, and the contrast transformation.

A fit always targets one covariate of interest. When the question is a
linear combination cᵀβ of effect rows instead, the design is re-expressed
as X̃ = (Xc/‖c‖², XL) so the first transformed coefficient row is cᵀβ.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


class DimensionMismatch(ValueError):
    """Raised when Y, X and the interest specification do not conform."""


class RankDeficientDesign(ValueError):
    """Raised when X does not have full column rank."""


class NonFiniteInput(ValueError):
    """Raised when Y or X contains NaN or infinite entries."""


class TooFewSamples(ValueError):
    """Raised when there is no leftover row after the rotation (n <= k)."""


class ZeroContrast(ValueError):
    """Raised for a contrast vector with zero norm."""


@dataclass(frozen=True)
class ContrastSpec:
    c: np.ndarray
    L: np.ndarray

    def stacked(self) -> np.ndarray:
        """(cᵀ; Lᵀ), k × k."""
        return np.vstack([self.c[None, :], self.L.T])

    def inverse(self) -> np.ndarray:
        """(c/‖c‖², L), the inverse of stacked()."""
        return np.column_stack([self.c / (self.c @ self.c), self.L])


@dataclass(frozen=True)
class ExpressionDataset:
    Y: np.ndarray
    X: np.ndarray
    interest: int  # 0-based column of X holding the covariate of interest
    gene_names: tuple[str, ...] | None = None
    contrast: ContrastSpec | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def design_interest_last(self) -> np.ndarray:
        """X with the covariate of interest moved to the last column."""
        order = [j for j in range(self.k) if j != self.interest] + [self.interest]
        return self.X[:, order]


def _dense(a, name: str) -> np.ndarray:
    if scipy.sparse.issparse(a):
        a = a.toarray()
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and name == "X":
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got {a.ndim} dimension(s)")
    return a


def _check_rank(X: np.ndarray) -> None:
    sv = np.linalg.svd(X, compute_uv=False)
    rank = int(np.sum(sv > RANK_TOL * sv[0])) if sv.size and sv[0] > 0 else 0
    if rank < X.shape[1]:
        raise RankDeficientDesign(f"X has rank {rank} < k = {X.shape[1]}")


def contrast_spec(c) -> ContrastSpec:
    """Orthonormal complement basis L for a contrast c (any basis is valid)."""
    c = np.asarray(c, dtype=float).ravel()
    if not np.all(np.isfinite(c)):
        raise NonFiniteInput("Contrast contains non-finite entries")
    if np.linalg.norm(c) == 0:
        raise ZeroContrast("Contrast vector must be nonzero")
    L = scipy.linalg.null_space(c[None, :], rcond=RANK_TOL)
    return ContrastSpec(c=c, L=L.reshape(c.size, c.size - 1))


def validate_dataset(Y, X, interest, gene_names=None) -> ExpressionDataset:
    """Check Y (n × p), X (n × k) and the interest spec.

    `interest` is a 1-based column index of X, or a contrast vector of length k.
    With an index, the covariate of interest is permuted to the last column.
    """
    Y = _dense(Y, "Y")
    X = _dense(X, "X")
    n, p = Y.shape
    if X.shape[0] != n:
        raise DimensionMismatch(f"Y has {n} rows but X has {X.shape[0]}")
    k = X.shape[1]
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(X))):
        raise NonFiniteInput("Y and X must not contain NaN or infinite values")
    if n < k + 1:
        raise TooFewSamples(f"Need n >= k + 1 samples, got n = {n}, k = {k}")
    _check_rank(X)
    if gene_names is not None:
        gene_names = tuple(str(g) for g in gene_names)
        if len(gene_names) != p:
            raise DimensionMismatch(f"{len(gene_names)} gene names for {p} columns")

    if np.ndim(interest) == 0:
        index = int(interest)
        if index != interest or not 1 <= index <= k:
            raise DimensionMismatch(f"interest must be a column index in 1..{k}, got {interest}")
        order = [j for j in range(k) if j != index - 1] + [index - 1]
        return ExpressionDataset(Y=Y, X=X[:, order], interest=k - 1, gene_names=gene_names)

    c = np.asarray(interest, dtype=float).ravel()
    if c.size != k:
        raise DimensionMismatch(f"Contrast has length {c.size}, X has k = {k} columns")
    base = ExpressionDataset(Y=Y, X=X, interest=k - 1, gene_names=gene_names)
    return apply_contrast(base, c)


def apply_contrast(ds: ExpressionDataset, c, spec: ContrastSpec | None = None) -> ExpressionDataset:
    """Re-express the design so its first column carries cᵀβ.

    `c` refers to the columns of ds.X as stored. A precomputed `spec` (with
    a different but equally valid L) may be supplied.
    """
    spec = spec or contrast_spec(c)
    if spec.c.size != ds.k:
        raise DimensionMismatch(f"Contrast has length {spec.c.size}, X has k = {ds.k} columns")
    X_tilde = ds.X @ spec.inverse()
    _check_rank(X_tilde)
    logger.debug("Applied contrast %s", np.array2string(spec.c, precision=4))
    return ExpressionDataset(
        Y=ds.Y, X=X_tilde, interest=0, gene_names=ds.gene_names, contrast=spec,
    )
