import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_record, small_config
from ret2.cell import FusionCellParams
from ret2.diagnostics import (leading_left_singular_vector, profile_gates, rank_collapse_score,
                              write_collapse_csv, write_gate_csv)
from ret2.errors import DataError, DimensionError


def svd_score(M):
    s = np.linalg.svd(M, compute_uv=False)
    return math.sqrt(max(0.0, (s ** 2).sum() - s[0] ** 2)) / math.sqrt((s ** 2).sum())


def test_rank_one_is_zero(rng):
    M = np.outer(rng.normal(size=5), rng.normal(size=7))
    assert rank_collapse_score(M) < 1e-7


def test_identity_two():
    assert abs(rank_collapse_score(np.eye(2)) - 1 / math.sqrt(2)) < 1e-9


@pytest.mark.parametrize("c", [1e-6, -3.0, 250.0])
def test_scale_invariance(rng, c):
    M = rng.normal(size=(6, 4))
    assert abs(rank_collapse_score(c * M) - rank_collapse_score(M)) < 1e-12


@given(st.integers(2, 8), st.integers(1, 10), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_matches_svd_and_respects_bound(k, d, seed):
    M = np.random.default_rng(seed).normal(size=(k, d))
    score = rank_collapse_score(M)
    assert 0.0 <= score <= math.sqrt((k - 1) / k) + 1e-12
    assert abs(score - svd_score(M)) < 1e-6


@pytest.mark.parametrize("k", [2, 3, 5, 8])
def test_bound_attained_by_orthogonal_equal_rows(rng, k):
    Qm, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    M = 3.0 * Qm[:k]
    assert abs(rank_collapse_score(M) - math.sqrt((k - 1) / k)) < 1e-6


def test_leading_vector_matches_svd(rng):
    M = rng.normal(size=(5, 9))
    u = leading_left_singular_vector(M)
    ref = np.linalg.svd(M)[0][:, 0]
    assert abs(abs(u @ ref) - 1.0) < 1e-9


def test_errors():
    with pytest.raises(DataError):
        rank_collapse_score(np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        rank_collapse_score(np.ones((1, 4)))


# -- gate profiles -----------------------------------------------------

def records(rng, n, visual=True):
    return [random_record(rng, f"r{i}", visual=visual if visual is not None else i % 2 == 0,
                          dims=(16, 16)) for i in range(n)]


def test_zero_gate_weights_give_half_means(rng):
    p = FusionCellParams.init(small_config(), seed=0)
    for n, t in p:
        if n.startswith("gate."):
            t.data[...] = 0.0
    prof = profile_gates(records(rng, 6, visual=None), p, batch_size=4)
    rows = prof.rows()
    assert len(rows) == 9
    assert all(m == 0.5 for _, _, m, _ in rows)
    assert prof.flags == []


def test_visual_absent_sample_is_flagged(rng):
    p = FusionCellParams.init(small_config(), seed=0)
    prof = profile_gates(records(rng, 4, visual=False), p)
    assert "input_visual_undefined" in prof.flags
    assert {g for _, g, _, _ in prof.rows()} == {"forget", "input_text"}
    assert prof.mean(0, "input_visual") is None


def test_means_match_recomputation_from_raw(rng, params):
    recs = records(rng, 7, visual=None)
    prof, raw = profile_gates(recs, params, batch_size=3, return_raw=True)
    for s in range(3):
        for gate, pres_attr in (("forget", None), ("input_text", "text_present"),
                                ("input_visual", "visual_present")):
            vals = []
            for log in raw:
                sg = log[s]
                g = getattr(sg, gate)
                if pres_attr is not None:
                    g = g[getattr(sg, pres_attr)]
                vals.extend(g.ravel().tolist())
            assert abs(np.mean(vals) - prof.mean(s, gate)) < 1e-12
            assert 0 < prof.mean(s, gate) < 1


def test_profile_is_deterministic(rng, params):
    recs = records(rng, 5)
    assert profile_gates(recs, params).rows() == profile_gates(recs, params).rows()


def test_profile_counts(rng, params):
    prof = profile_gates(records(rng, 6, visual=None), params)
    n = {(s, g): cnt for s, g, _, cnt in prof.rows()}
    assert n[1, "forget"] == 6 and n[1, "input_text"] == 6 and n[1, "input_visual"] == 3


def test_empty_sample(params):
    with pytest.raises(DataError):
        profile_gates([], params)


def test_csv_outputs(tmp_path, rng, params):
    prof = profile_gates(records(rng, 3), params)
    write_gate_csv(prof, tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["step", "gate", "mean", "n"] and len(rows) == 10
    assert float(rows[1][2]) == prof.rows()[0][2]
    write_collapse_csv([("q0", 0.25), ("q1", 0.5)], tmp_path / "c.csv")
    assert list(csv.reader(open(tmp_path / "c.csv"))) == [["matrix_id", "score"], ["q0", "0.25"],
                                                           ["q1", "0.5"]]
