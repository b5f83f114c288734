"""Shared config, seeding, file I/O, and run manifests."""

import json
import os
import platform
import re
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import BaseModel, Field

PROJECT_ROOT = Path(__file__).resolve().parent
load_dotenv(PROJECT_ROOT / ".env")

VERSION = "0.3.0"
FLOAT_FORMAT = "%.12g"
NA_REP = "NA"

# --- Paths ---

_env_dir = os.environ.get("UNWASH_OUTPUT_DIR", "")
_fallback = str(PROJECT_ROOT / "output")

try:
    Path(_env_dir).mkdir(parents=True, exist_ok=True) if _env_dir else None
    DEFAULT_OUTPUT_DIR = _env_dir or _fallback
except PermissionError:
    DEFAULT_OUTPUT_DIR = _fallback


class InputFileError(ValueError):
    """Raised when an input CSV cannot be parsed into a numeric matrix."""


# --- Config ---

def resolve_threads(requested: int | None = None) -> int:
    """Worker count: explicit value, then UNWASH_THREADS, then all cores."""
    if requested is not None:
        if requested < 1:
            raise ValueError(f"Thread count must be positive, got {requested}")
        return requested
    env = os.environ.get("UNWASH_THREADS", "").strip()
    if env:
        if not re.fullmatch(r"\d+", env) or int(env) < 1:
            raise ValueError(f"UNWASH_THREADS must be a positive integer, got {env!r}")
        return int(env)
    return os.cpu_count() or 1


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, *keys); order of use does not matter."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def derive_seed(seed: int, *keys: int) -> int:
    """Integer sub-seed for (seed, *keys), e.g. one per replicate."""
    state = np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)
    return int(state[0])


def output_dir(path: str | None) -> Path:
    """Create and return the output directory (default from UNWASH_OUTPUT_DIR)."""
    target = Path(path or DEFAULT_OUTPUT_DIR)
    target.mkdir(parents=True, exist_ok=True)
    return target


# --- CSV ---

def read_matrix_csv(path: str | Path, header: bool = True) -> tuple[list[str], np.ndarray]:
    """Read a numeric CSV into (column names, float matrix).

    Rows are samples. Errors name the 1-based line of the file so a user can
    find the offending entry.
    """
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"{path}: file not found")
    try:
        frame = pd.read_csv(path, header=0 if header else None, dtype=str,
                            keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise InputFileError(f"{path}: {e}") from e
    if frame.empty:
        raise InputFileError(f"{path}: no data rows")

    names = [str(c) for c in frame.columns] if header else [f"V{i + 1}" for i in range(frame.shape[1])]
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = map(int, np.argwhere(bad)[0])
        line = row + (2 if header else 1)
        raise InputFileError(
            f"{path}: line {line}, column {names[col]!r}: "
            f"not a number: {frame.iat[row, col]!r}"
        )
    return names, numeric.to_numpy(dtype=float)


def write_frame_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    """Write a table with the project's fixed float format and NA marker."""
    path = Path(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep=NA_REP,
                 encoding="utf-8", lineterminator="\n")
    return path


def write_json(payload: dict, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def parse_float_list(text: str) -> np.ndarray:
    """Parse "1,-1,0" into a float vector."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError(f"Empty vector: {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as e:
        raise ValueError(f"Not a comma-separated list of numbers: {text!r}") from e


# --- Manifests ---

class RunManifest(BaseModel):
    command: str
    config: dict = Field(default_factory=dict)
    seed: int | None = None
    versions: dict[str, str] = Field(default_factory=dict)
    wall_time_s: float = 0.0
    converged: dict[str, bool] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)


def package_versions() -> dict[str, str]:
    import scipy
    import pydantic

    return {
        "unwash": VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.__version__,
    }


def write_manifest(manifest: RunManifest, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path
