"""Scoring harness: null/non-null AUC, π₀ error and method comparison tables.

Each (study, method) cell runs in a worker thread; a failing cell becomes
an NA row with its error message rather than aborting the comparison.
"""

import asyncio
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from scipy import stats

from backwash import fit_backwash
from data_model import validate_dataset
from factor_analysis import control_gene_adjust, truncated_pca
from mouthwash import MouthwashConfig, fit_mouthwash, fit_normal_means
from posterior import pi0, posterior_summaries
from rotation import ols_standard_errors, rotate
from simulation import SimulatedStudy
from utils import InputFileError, derive_seed, resolve_threads

logger = logging.getLogger(__name__)

CONDITION_COLUMNS = ["n", "p", "pi0", "m", "uv_rank"]
SUMMARY_COLUMNS = CONDITION_COLUMNS + [
    "method", "n_replicates", "n_failed", "mean_auc",
    "pi0_mean", "pi0_sd", "pi0_bias", "pi0_mse", "error",
]
CELL_COLUMNS = ["study"] + CONDITION_COLUMNS + ["method", "auc", "pi0hat", "pi0_true", "error"]
DEFAULT_METHODS = ("mouthwash", "ols")


class SingleClass(ValueError):
    """Raised when AUC is requested with only nulls or only non-nulls."""


@dataclass(frozen=True)
class MethodScores:
    method: str
    scores: np.ndarray | None
    pi0_hat: float | None = None
    error: str | None = None


# --- Metrics ---

def auc(scores, is_null) -> float:
    """Pr(random non-null outranks random null), ties counted one half."""
    scores = np.asarray(scores, dtype=float)
    is_null = np.asarray(is_null, dtype=bool)
    if scores.shape != is_null.shape:
        raise ValueError(f"{scores.size} scores for {is_null.size} genes")
    n_null = int(is_null.sum())
    n_alt = is_null.size - n_null
    if n_null == 0 or n_alt == 0:
        raise SingleClass("AUC needs both null and non-null genes")
    ranks = stats.rankdata(scores)
    u = ranks[~is_null].sum() - n_alt * (n_alt + 1) / 2
    return float(u / (n_alt * n_null))


def pi0_error(pi0_hat: float, pi0_true: float) -> tuple[float, float]:
    """(bias, squared error) of an estimated null proportion."""
    for name, value in (("pi0_hat", pi0_hat), ("pi0_true", pi0_true)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    bias = pi0_hat - pi0_true
    return bias, bias**2


# --- Method runners ---

def _rotated(study: SimulatedStudy):
    ds = validate_dataset(study.Y, study.design(), 2, gene_names=study.gene_names)
    return rotate(ds)


def run_mouthwash(study: SimulatedStudy, q: int, seed: int) -> MethodScores:
    rm = _rotated(study)
    fa = truncated_pca(rm.Y3, q)
    fit = fit_mouthwash(rm, fa, MouthwashConfig(seed=seed))
    return MethodScores("mouthwash", 1 - posterior_summaries(rm, fa, fit).lfdr, pi0(fit))


def run_backwash(study: SimulatedStudy, q: int, seed: int) -> MethodScores:
    rm = _rotated(study)
    fa = truncated_pca(rm.Y3, q)
    fit = fit_backwash(rm, fa)
    return MethodScores("backwash", 1 - posterior_summaries(rm, fa, fit).lfdr, pi0(fit))


def run_ols(study: SimulatedStudy, q: int, seed: int) -> MethodScores:
    """No confounder adjustment: shrink the raw OLS effects."""
    rm = _rotated(study)
    fa = truncated_pca(rm.Y3, 0)
    fit = fit_normal_means(rm.betahat, ols_standard_errors(rm, fa.sigma2))
    return MethodScores("ols", 1 - posterior_summaries(rm, None, fit).lfdr, pi0(fit))


def run_ols_t(study: SimulatedStudy, q: int, seed: int) -> MethodScores:
    rm = _rotated(study)
    fa = truncated_pca(rm.Y3, 0)
    return MethodScores("ols_t", np.abs(rm.betahat / ols_standard_errors(rm, fa.sigma2)))


def run_control_tem(study: SimulatedStudy, q: int, seed: int) -> MethodScores:
    """Control-gene t-EM adjustment followed by plain shrinkage."""
    if study.controls.size == 0:
        raise ValueError("control_tem needs control genes (m_controls > 0)")
    rm = _rotated(study)
    fa = truncated_pca(rm.Y3, q)
    shat = ols_standard_errors(rm, fa.sigma2)
    adj = control_gene_adjust(rm.betahat, shat, fa.alpha / rm.r22, study.controls, fa.df)
    fit = fit_normal_means(adj.adjusted_betahat, adj.adjusted_se)
    return MethodScores("control_tem", 1 - posterior_summaries(None, None, fit).lfdr, pi0(fit))


RUNNERS: dict[str, Callable[[SimulatedStudy, int, int], MethodScores]] = {
    "mouthwash": run_mouthwash,
    "backwash": run_backwash,
    "ols": run_ols,
    "ols_t": run_ols_t,
    "control_tem": run_control_tem,
}


# --- Imported scores ---

def load_scores_csv(path: str | Path, studies: list[SimulatedStudy]) -> dict[str, list[MethodScores]]:
    """Read externally computed scores, keyed by study name.

    Columns: method, gene, score, optional pi0hat, and study (may be omitted
    when exactly one study is evaluated). Genes are aligned to each study's
    gene order; a method that does not cover every gene becomes an error cell.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise InputFileError(f"{path}: {e}") from e
    missing = {"method", "gene", "score"} - set(frame.columns)
    if missing:
        raise InputFileError(f"{path}: missing column(s) {sorted(missing)}")
    if "study" not in frame.columns:
        if len(studies) != 1:
            raise InputFileError(f"{path}: a 'study' column is required with {len(studies)} studies")
        frame["study"] = studies[0].name

    by_name = {s.name: s for s in studies}
    out: dict[str, list[MethodScores]] = {}
    for (study_name, method), group in frame.groupby(["study", "method"], sort=False):
        study = by_name.get(str(study_name))
        if study is None:
            logger.warning("%s: scores for unknown study %r ignored", path, study_name)
            continue
        out.setdefault(study.name, []).append(_align_scores(study, str(method), group))
    return out


def _align_scores(study: SimulatedStudy, method: str, group: pd.DataFrame) -> MethodScores:
    pi0_hat = None
    if "pi0hat" in group.columns and group["pi0hat"].notna().any():
        pi0_hat = float(group["pi0hat"].dropna().iloc[0])
    scores = group.set_index(group["gene"].astype(str))["score"]
    if len(group) != study.p or scores.index.duplicated().any():
        return MethodScores(method, None, pi0_hat, f"expected {study.p} scores, got {len(group)}")
    aligned = scores.reindex(list(study.gene_names))
    if aligned.isna().any():
        return MethodScores(method, None, pi0_hat, "scores do not cover every gene")
    return MethodScores(method, aligned.to_numpy(dtype=float), pi0_hat)


# --- Comparison ---

def _run_cell(study: SimulatedStudy, method: str, q: int, seed: int) -> MethodScores:
    try:
        return RUNNERS[method](study, q, seed)
    except (ValueError, np.linalg.LinAlgError) as e:
        logger.warning("%s / %s failed: %s", study.name, method, e)
        return MethodScores(method, None, None, f"{type(e).__name__}: {e}")


def _cell_row(study: SimulatedStudy, result: MethodScores) -> dict:
    row = {"study": study.name, **study.condition(), "method": result.method,
           "auc": np.nan, "pi0hat": np.nan, "pi0_true": study.config.pi0, "error": result.error or ""}
    if result.scores is None:
        return row
    try:
        if result.scores.shape != (study.p,) or not np.all(np.isfinite(result.scores)):
            raise ValueError(f"expected {study.p} finite scores")
        row["auc"] = auc(result.scores, study.is_null)
    except SingleClass:
        # all-null or all-non-null study: AUC is undefined, π̂₀ still counts
        logger.debug("%s / %s: AUC undefined for a single-class study", study.name, result.method)
    except ValueError as e:
        row["error"] = f"{type(e).__name__}: {e}"
    if result.pi0_hat is not None:
        row["pi0hat"] = result.pi0_hat
    return row


async def score_cells_async(studies: list[SimulatedStudy], methods=DEFAULT_METHODS, q: int = 2,
                            imported: dict[str, list[MethodScores]] | None = None,
                            threads: int | None = None, seed: int = 0) -> pd.DataFrame:
    """One row per (study, method); rows follow study order, then method order."""
    unknown = set(methods) - set(RUNNERS)
    if unknown:
        raise ValueError(f"Unknown method(s) {sorted(unknown)}; choose from {sorted(RUNNERS)}")
    sem = asyncio.Semaphore(resolve_threads(threads))

    async def cell(i: int, study: SimulatedStudy, method: str) -> MethodScores:
        async with sem:
            return await asyncio.to_thread(_run_cell, study, method, q, derive_seed(seed, i))

    tasks = [cell(i, study, method) for i, study in enumerate(studies) for method in methods]
    results = iter(await asyncio.gather(*tasks))

    rows = []
    imported = imported or {}
    for study in studies:
        for _ in methods:
            rows.append(_cell_row(study, next(results)))
        for ext in imported.get(study.name, []):
            rows.append(_cell_row(study, ext))
    return pd.DataFrame(rows, columns=CELL_COLUMNS)


def summarize(cells: pd.DataFrame) -> pd.DataFrame:
    """Aggregate cells per condition × method."""
    rows = []
    for key, group in cells.groupby(CONDITION_COLUMNS + ["method"], sort=False):
        ok = group[group["error"] == ""]
        pi0_rows = ok.dropna(subset=["pi0hat"])
        errors = np.array([pi0_error(h, t) for h, t in zip(pi0_rows["pi0hat"], pi0_rows["pi0_true"])])
        errors_text = "; ".join(dict.fromkeys(e for e in group["error"] if e))
        rows.append({
            **dict(zip(CONDITION_COLUMNS + ["method"], key)),
            "n_replicates": len(group),
            "n_failed": len(group) - len(ok),
            "mean_auc": ok["auc"].mean() if len(ok) else np.nan,
            "pi0_mean": pi0_rows["pi0hat"].mean() if len(pi0_rows) else np.nan,
            "pi0_sd": pi0_rows["pi0hat"].std(ddof=1) if len(pi0_rows) > 1 else np.nan,
            "pi0_bias": errors[:, 0].mean() if len(errors) else np.nan,
            "pi0_mse": errors[:, 1].mean() if len(errors) else np.nan,
            "error": errors_text,
        })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


async def compare_async(studies: list[SimulatedStudy], methods=DEFAULT_METHODS, q: int = 2,
                        imported: dict[str, list[MethodScores]] | None = None,
                        threads: int | None = None, seed: int = 0) -> pd.DataFrame:
    if not studies:
        raise ValueError("compare needs at least one study")
    cells = await score_cells_async(studies, methods, q, imported, threads, seed)
    return summarize(cells)


def compare(studies: list[SimulatedStudy], methods=DEFAULT_METHODS, q: int = 2,
            imported: dict[str, list[MethodScores]] | None = None,
            threads: int | None = None, seed: int = 0) -> pd.DataFrame:
    return asyncio.run(compare_async(studies, methods, q, imported, threads, seed))
