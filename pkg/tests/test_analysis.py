import csv
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypercloning import analysis as A
from hypercloning import cloning as C
from hypercloning.errors import ContractError
from hypercloning.tensor import Rng


def cosine_oracle(w, in_map):
    """Direct loop over rows and unordered copy pairs."""
    groups = in_map.groups()
    vals = []
    for row in w:
        for a, b in itertools.combinations(range(groups.shape[0]), 2):
            u, v = row[groups[a]], row[groups[b]]
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            vals.append(0.0 if nu == 0 or nv == 0 else float(u @ v) / (nu * nv))
    return sum(vals) / len(vals)


def _clone(w, n, strategy, snr=10.0, seed=0):
    m_in = C.make_clone_map(w.shape[1], n)
    m_out = C.make_clone_map(w.shape[0], n)
    return C.expand_linear(w, None, m_in, m_out, strategy, snr, Rng(seed))[0], m_in


@pytest.mark.parametrize("n", [2, 3, 4])
def test_symmetric_clone_cosine_is_one(rng, n):
    w_d, m = _clone(rng.standard_normal((6, 5)), n, "symmetric")
    assert abs(A.symmetry_cosine(w_d, m) - 1.0) <= 1e-12


def test_diagonal_clone_cosine_is_zero(rng):
    w_d, m = _clone(rng.standard_normal((6, 5)), 2, "diagonal")
    assert A.symmetry_cosine(w_d, m) == 0.0


def test_noisy_symmetric_between_half_and_one(rng):
    w_d, m = _clone(rng.standard_normal((64, 64)), 2, "noisy-symmetric", 10.0)
    value = A.symmetry_cosine(w_d, m)
    assert 0.5 < value < 1.0
    assert math.isclose(value, cosine_oracle(w_d, m), rel_tol=1e-12)


@pytest.mark.parametrize("strategy", C.STRATEGIES)
def test_cosine_matches_oracle(rng, strategy):
    w_d, m = _clone(rng.standard_normal((7, 4)), 3, strategy)
    assert math.isclose(A.symmetry_cosine(w_d, m), cosine_oracle(w_d, m), rel_tol=1e-12, abs_tol=1e-15)


def test_cosine_interleaved_map(rng):
    m = C.make_head_clone_map(2, 3, 1, 2)
    w = rng.standard_normal((4, 12))
    assert math.isclose(A.symmetry_cosine(w, m), cosine_oracle(w, m), rel_tol=1e-12)


def test_zero_subvector_counts_as_zero():
    m = C.make_clone_map(2, 2)
    w = np.array([[1.0, 2.0, 1.0, 2.0], [0.0, 0.0, 3.0, 1.0]])
    assert A.symmetry_cosine(w, m) == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(alpha=st.floats(0.01, 100), beta=st.floats(0.01, 100), seed=st.integers(0, 2**31))
def test_cosine_scale_invariant(alpha, beta, seed):
    g = np.random.default_rng(seed)
    w = g.standard_normal((3, 8))
    m = C.make_clone_map(4, 2)
    scaled = w.copy()
    scaled[:, :4] *= alpha
    scaled[:, 4:] *= beta
    assert math.isclose(A.symmetry_cosine(scaled, m), A.symmetry_cosine(w, m), rel_tol=1e-10, abs_tol=1e-12)


def test_cosine_contract(rng):
    with pytest.raises(ContractError):
        A.symmetry_cosine(rng.standard_normal((3, 4)), C.identity_map(4))
    with pytest.raises(ContractError):
        A.symmetry_cosine(rng.standard_normal((3, 5)), C.make_clone_map(2, 2))


def test_spectrum_zero_counts(rng):
    w = rng.standard_normal((8, 8))
    w_d, _ = _clone(w, 2, "symmetric")
    sv, zc = A.spectrum(w_d, 1e-6)
    assert sv.shape == (16,) and np.all(np.diff(sv) <= 0) and np.all(sv >= 0)
    assert zc >= 8
    assert A.spectrum(rng.standard_normal((16, 16)), 1e-6)[1] == 0
    with pytest.raises(ContractError):
        A.spectrum(w, 0.0)
    with pytest.raises(ContractError):
        A.spectrum(w, 1.0)


def test_zero_count_monotone_in_threshold(rng):
    sv, _ = A.spectrum(rng.standard_normal((10, 6)) @ np.diag([1, 1e-2, 1e-4, 1e-6, 1e-8, 1e-10]) @ rng.standard_normal((6, 6)))
    counts = [A.zero_count(sv, t) for t in (1e-9, 1e-7, 1e-5, 1e-3, 1e-1)]
    assert counts == sorted(counts)


@pytest.mark.parametrize("strategy", ["symmetric", "diagonal"])
def test_rank_bound_by_dest_rows(rng, strategy):
    # rank(W) = 3; every zero-count is at least dest_rows - rank of the clone
    w = rng.standard_normal((6, 3)) @ rng.standard_normal((3, 6))
    w_d, _ = _clone(w, 2, strategy)
    _, zc = A.spectrum(w_d, 1e-6)
    clone_rank = 3 if strategy == "symmetric" else 6
    assert zc == 12 - clone_rank


def test_track_default_selection(micro, micro_clone):
    pd, _, rc = micro_clone
    sym, spec = A.track(pd, rc, 0)
    names = [r["tensor"] for r in sym.rows]
    assert names == ["blocks.0.ffn.w_up", "blocks.1.ffn.w_up", "unembedding"]
    assert all(abs(r["cosine"] - 1.0) <= 1e-7 for r in sym.rows)
    assert [r["tensor"] for r in spec.rows] == names
    assert sym.value("unembedding", 0) == sym.rows[2]["cosine"]


def test_track_unknown_tensor(micro_clone):
    pd, _, rc = micro_clone
    with pytest.raises(ContractError, match="no tensor matches"):
        A.track(pd, rc, 0, selection=["blocks.9.ffn.w_up"])


def test_track_without_receipt(micro):
    config, params = micro
    sym, spec = A.track(params, None, 0, selection=["blocks.0.ffn.w_up"])
    assert sym.rows == [] and spec.rows[0]["zero_count"] == 0
    with pytest.raises(ContractError):
        A.select_tensors(None, None, require_fold=True, params=params)


def test_hook_writes_files(tmp_path, micro_clone):
    pd, _, rc = micro_clone
    hook = A.make_track_hook(rc, str(tmp_path))
    hook(0, pd)
    hook(5, pd)
    with open(tmp_path / "symmetry.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [0, 0, 0, 5, 5, 5]
    assert all(float(r["cosine"]) == 1.0 for r in rows)
    with open(tmp_path / "spectra.json") as fh:
        spectra = json.load(fh)
    assert set(spectra["unembedding"]) == {"0", "5"}
    assert len(spectra["blocks.0.ffn.w_up"]["0"]) == 64
