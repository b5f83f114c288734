"""Signal spike-in by binomial thinning of null count data.

Samples are split at random into two equal groups. For a non-null gene with
log2 effect a, counts are thinned so the groups differ by roughly 2^a:

    a < 0: w = Binomial(z, 2^(a·x))        (group x = 1 is thinned)
    a > 0: w = Binomial(z, 2^(−a·(1−x)))   (group x = 0 is thinned)

Null genes keep their base counts exactly.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils import derive_rng, derive_seed, read_matrix_csv, write_frame_csv, write_json

logger = logging.getLogger(__name__)

PSEUDOCOUNT = 1.0
MIN_MEAN_COUNT = 10.0
BASE_LOG_MEAN = math.log(500.0)
BASE_LOG_SD = 1.0

# sub-stream keys for derive_rng
_DESIGN_KEY = 0
_THIN_KEY = 1
_RATE_KEY = 2
_UV_KEY = 3
_POISSON_KEY = 4
_SAMPLE_KEY = 5


class SimulationConfig(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    n: int = Field(40, ge=2)
    p: int = Field(1000, ge=1)
    pi0: float = Field(0.9, ge=0.0, le=1.0)
    effect_sd: float = Field(0.8, gt=0)
    m_controls: int = Field(0, ge=0)
    seed: int = 0
    uv_rank: int = Field(0, ge=0)
    uv_strength: float = Field(0.5, ge=0.0)
    base_counts: np.ndarray | None = Field(None, exclude=True, repr=False)
    base_gene_names: list[str] | None = Field(None, exclude=True, repr=False)

    @model_validator(mode="after")
    def _check(self) -> "SimulationConfig":
        if self.n % 2:
            raise ValueError(f"n must be even, got {self.n}")
        if self.m_controls > self.p - n_nonnull(self.p, self.pi0):
            raise ValueError(f"m_controls = {self.m_controls} exceeds the number of null genes")
        if self.base_counts is not None:
            base = np.asarray(self.base_counts)
            if base.ndim != 2 or base.shape[0] < self.n or base.shape[1] < self.p:
                raise ValueError(f"base counts of shape {base.shape} cannot supply n = {self.n}, p = {self.p}")
            if np.any(base < 0) or np.any(base != np.round(base)):
                raise ValueError("base counts must be nonnegative integers")
            if self.base_gene_names is not None and len(self.base_gene_names) != base.shape[1]:
                raise ValueError("base_gene_names must match the base count columns")
        return self


@dataclass(frozen=True)
class SimulatedStudy:
    W: np.ndarray
    Y: np.ndarray
    x2: np.ndarray
    is_null: np.ndarray
    effects: np.ndarray
    controls: np.ndarray
    gene_names: tuple[str, ...]
    config: SimulationConfig = field(repr=False)
    name: str = "study"

    @property
    def p(self) -> int:
        return self.W.shape[1]

    def design(self) -> np.ndarray:
        """Intercept plus group indicator; the group is column 2 (1-based)."""
        return np.column_stack([np.ones(self.x2.size), self.x2.astype(float)])

    def truth_frame(self) -> pd.DataFrame:
        is_control = np.zeros(self.p, dtype=bool)
        is_control[self.controls] = True
        return pd.DataFrame({
            "gene": list(self.gene_names),
            "is_null": self.is_null.astype(int),
            "effect": self.effects,
            "is_control": is_control.astype(int),
        })

    def condition(self) -> dict:
        cfg = self.config
        return {"n": cfg.n, "p": cfg.p, "pi0": cfg.pi0, "m": cfg.m_controls, "uv_rank": cfg.uv_rank}


def n_nonnull(p: int, pi0: float) -> int:
    return math.floor(round((1.0 - pi0) * p, 9))


# --- Base data ---

def synthetic_base_counts(n: int, p: int, seed: int, uv_factors: int = 0,
                          uv_strength: float = 0.5) -> np.ndarray:
    """Poisson counts with log-normal gene rates and optional planted factors.

    Each ingredient draws from its own seeded stream, so uv_strength = 0
    reproduces the uv_factors = 0 matrix exactly.
    """
    if n < 1 or p < 1:
        raise ValueError(f"n and p must be positive, got n = {n}, p = {p}")
    log_rate = np.broadcast_to(
        derive_rng(seed, _RATE_KEY).normal(BASE_LOG_MEAN, BASE_LOG_SD, size=p), (n, p),
    ).copy()
    if uv_factors > 0 and uv_strength > 0:
        rng = derive_rng(seed, _UV_KEY)
        Z = rng.normal(size=(n, uv_factors))
        A = rng.normal(size=(uv_factors, p))
        log_rate += uv_strength * Z @ A
    return derive_rng(seed, _POISSON_KEY).poisson(np.exp(log_rate)).astype(np.int64)


def filter_low_expression(counts, min_mean: float = MIN_MEAN_COUNT) -> tuple[np.ndarray, np.ndarray]:
    """Drop genes whose mean count is below `min_mean`; returns (counts, kept columns)."""
    counts = np.asarray(counts)
    keep = np.flatnonzero(counts.mean(axis=0) >= min_mean)
    logger.info("Kept %d of %d genes with mean count >= %g", keep.size, counts.shape[1], min_mean)
    return counts[:, keep], keep


def _select_base(cfg: SimulationConfig) -> tuple[np.ndarray, tuple[str, ...]]:
    if cfg.base_counts is None:
        counts = synthetic_base_counts(cfg.n, cfg.p, cfg.seed, cfg.uv_rank, cfg.uv_strength)
        return counts, tuple(f"gene{j + 1}" for j in range(cfg.p))

    base = np.asarray(cfg.base_counts).astype(np.int64)
    names = cfg.base_gene_names or [f"gene{j + 1}" for j in range(base.shape[1])]
    if base.shape[0] > cfg.n:
        rows = np.sort(derive_rng(cfg.seed, _SAMPLE_KEY).choice(base.shape[0], cfg.n, replace=False))
        base = base[rows]
    # top-p most highly expressed genes, original column order kept
    cols = np.sort(np.argsort(-base.mean(axis=0), kind="stable")[: cfg.p])
    return base[:, cols], tuple(names[j] for j in cols)


# --- Thinning ---

def thinning_probabilities(effect: float, x2: np.ndarray) -> np.ndarray:
    if effect < 0:
        return np.exp2(effect * x2)
    return np.exp2(-effect * (1 - x2))


def thin_counts(counts, x2, effects, seed: int) -> np.ndarray:
    """Apply the two-branch binomial thinning gene by gene.

    Gene j draws from the stream (seed, j) so the result does not depend on
    the order genes are processed in.
    """
    counts = np.asarray(counts, dtype=np.int64)
    x2 = np.asarray(x2, dtype=float)
    W = counts.copy()
    for j in np.flatnonzero(effects):
        rng = derive_rng(seed, _THIN_KEY, j)
        W[:, j] = rng.binomial(counts[:, j], thinning_probabilities(effects[j], x2))
    return W


def simulate(cfg: SimulationConfig, name: str = "study") -> SimulatedStudy:
    base, genes = _select_base(cfg)
    n, p = base.shape
    rng = derive_rng(cfg.seed, _DESIGN_KEY)

    x2 = np.zeros(n, dtype=int)
    x2[rng.permutation(n)[: n // 2]] = 1

    k = n_nonnull(p, cfg.pi0)
    nonnull = rng.choice(p, size=k, replace=False)
    effects = np.zeros(p)
    effects[nonnull] = rng.normal(0.0, cfg.effect_sd, size=k)
    is_null = np.ones(p, dtype=bool)
    is_null[nonnull] = False
    controls = np.sort(rng.choice(np.flatnonzero(is_null), size=cfg.m_controls, replace=False))

    W = thin_counts(base, x2, effects, cfg.seed)
    logger.info("Simulated %s: n=%d, p=%d, %d non-null, %d controls", name, n, p, k, controls.size)
    return SimulatedStudy(
        W=W, Y=np.log2(W + PSEUDOCOUNT), x2=x2, is_null=is_null, effects=effects,
        controls=controls, gene_names=genes, config=cfg, name=name,
    )


def replicate_configs(cfg: SimulationConfig, n_replicates: int) -> list[SimulationConfig]:
    """Per-replicate configs seeded from (base seed, replicate index)."""
    return [cfg.model_copy(update={"seed": derive_seed(cfg.seed, r)}) for r in range(n_replicates)]


# --- Files ---

def save_study(study: SimulatedStudy, out_dir: str | Path) -> list[Path]:
    """Write the study bundle; y.csv and x.csv feed `fit` directly."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    genes = list(study.gene_names)
    paths = [
        write_frame_csv(pd.DataFrame(study.W, columns=genes), out / "counts.csv"),
        write_frame_csv(pd.DataFrame(study.Y, columns=genes), out / "y.csv"),
        write_frame_csv(pd.DataFrame(study.design(), columns=["intercept", "group"]), out / "x.csv"),
        write_frame_csv(pd.DataFrame({"sample": np.arange(1, study.x2.size + 1), "group": study.x2}),
                        out / "groups.csv"),
        write_frame_csv(study.truth_frame(), out / "truth.csv"),
        write_json({"name": study.name, "pseudocount": PSEUDOCOUNT, "config": study.config.model_dump()},
                   out / "study.json"),
    ]
    return paths


def load_study(study_dir: str | Path) -> SimulatedStudy:
    study_dir = Path(study_dir)
    meta = json.loads((study_dir / "study.json").read_text(encoding="utf-8"))
    cfg = SimulationConfig(**meta["config"])
    genes, W = read_matrix_csv(study_dir / "counts.csv")
    _, groups = read_matrix_csv(study_dir / "groups.csv")
    truth = pd.read_csv(study_dir / "truth.csv")
    if list(truth["gene"].astype(str)) != genes:
        raise ValueError(f"{study_dir}: truth.csv genes do not match counts.csv")
    W = W.astype(np.int64)
    return SimulatedStudy(
        W=W,
        Y=np.log2(W + meta.get("pseudocount", PSEUDOCOUNT)),
        x2=groups[:, 1].astype(int),
        is_null=truth["is_null"].to_numpy().astype(bool),
        effects=truth["effect"].to_numpy(dtype=float),
        controls=np.flatnonzero(truth["is_control"].to_numpy()),
        gene_names=tuple(genes),
        config=cfg,
        name=meta.get("name", study_dir.name),
    )
