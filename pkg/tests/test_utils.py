"""Tests for utils.py — seeding, thread config, CSV and manifest I/O."""

import json

import numpy as np
import pandas as pd
import pytest

from utils import (
    InputFileError, RunManifest, derive_rng, derive_seed, parse_float_list,
    read_matrix_csv, resolve_threads, write_frame_csv, write_manifest,
)


# -- derive_rng / derive_seed --

def test_derive_rng_is_reproducible():
    a = derive_rng(7, 1, 3).normal(size=5)
    b = derive_rng(7, 1, 3).normal(size=5)
    assert np.array_equal(a, b)


def test_derive_rng_streams_differ_by_key():
    a = derive_rng(7, 1, 3).normal(size=5)
    b = derive_rng(7, 1, 4).normal(size=5)
    assert not np.allclose(a, b)


def test_derive_seed_depends_on_index():
    seeds = {derive_seed(0, r) for r in range(20)}
    assert len(seeds) == 20
    assert derive_seed(0, 3) == derive_seed(0, 3)


# -- resolve_threads --

def test_explicit_threads_win(monkeypatch):
    monkeypatch.setenv("UNWASH_THREADS", "8")
    assert resolve_threads(2) == 2


def test_threads_from_env(monkeypatch):
    monkeypatch.setenv("UNWASH_THREADS", "3")
    assert resolve_threads() == 3


def test_threads_default_to_cores(monkeypatch):
    monkeypatch.delenv("UNWASH_THREADS", raising=False)
    assert resolve_threads() >= 1


@pytest.mark.parametrize("value", ["0", "-2", "four"])
def test_bad_thread_env_rejected(monkeypatch, value):
    monkeypatch.setenv("UNWASH_THREADS", value)
    with pytest.raises(ValueError, match="UNWASH_THREADS"):
        resolve_threads()


def test_nonpositive_threads_rejected():
    with pytest.raises(ValueError, match="positive"):
        resolve_threads(0)


# -- read_matrix_csv --

def test_read_matrix_csv(tmp_path):
    path = tmp_path / "y.csv"
    path.write_text("g1,g2\n1,2.5\n3,-4\n", encoding="utf-8")
    names, values = read_matrix_csv(path)
    assert names == ["g1", "g2"]
    assert np.array_equal(values, np.array([[1.0, 2.5], [3.0, -4.0]]))


def test_read_matrix_csv_reports_line_number(tmp_path):
    path = tmp_path / "y.csv"
    path.write_text("g1,g2\n1,2\n3,oops\n", encoding="utf-8")
    with pytest.raises(InputFileError, match="line 3, column 'g2'"):
        read_matrix_csv(path)


def test_read_matrix_csv_missing_file(tmp_path):
    with pytest.raises(InputFileError, match="not found"):
        read_matrix_csv(tmp_path / "absent.csv")


def test_read_matrix_csv_without_header(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("1,0\n1,1\n", encoding="utf-8")
    names, values = read_matrix_csv(path, header=False)
    assert names == ["V1", "V2"]
    assert values.shape == (2, 2)


# -- write_frame_csv --

def test_write_frame_csv_uses_na_and_fixed_format(tmp_path):
    frame = pd.DataFrame({"a": [0.1234567890123456, np.nan], "b": ["x", "y"]})
    path = write_frame_csv(frame, tmp_path / "out.csv")
    assert path.read_text(encoding="utf-8") == "a,b\n0.123456789012,x\nNA,y\n"


# -- parse_float_list --

def test_parse_float_list():
    assert np.array_equal(parse_float_list("1, -1,0.5"), np.array([1.0, -1.0, 0.5]))


@pytest.mark.parametrize("text", ["", "1,a"])
def test_parse_float_list_rejects_bad_input(text):
    with pytest.raises(ValueError):
        parse_float_list(text)


# -- write_manifest --

def test_manifest_written_as_json(tmp_path):
    manifest = RunManifest(command="fit", config={"q": 2}, seed=3, converged={"mouthwash": True},
                           outputs=["genes.csv"])
    path = write_manifest(manifest, tmp_path)
    loaded = json.loads(path.read_text(encoding="utf-8"))
    assert loaded["command"] == "fit"
    assert loaded["config"] == {"q": 2}
    assert loaded["converged"] == {"mouthwash": True}
