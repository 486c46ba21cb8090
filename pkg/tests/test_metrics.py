import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drive_cbm import metrics as mt
from drive_cbm import model as cbm
from drive_cbm.perturbations import PerturbationSpec
from drive_cbm.tensor import ContractError


def brute_top_k(x, k):
    return set(sorted(range(len(x)), key=lambda i: (-x[i], i))[:k])


def test_top_k_examples():
    assert mt.top_k_set([3, 1, 2], 2).indices == (0, 2)
    assert mt.top_k_set([5, 5, 1], 1).indices == (0,)
    assert mt.top_k_set([0.1, -4, 9, 2], 4).indices == (0, 1, 2, 3)
    assert mt.top_k_overlap([3, 1, 2], [3, 2, 1], 2) == 0.5
    assert mt.top_k_overlap([0, 0, 5, 6], [7, 8, 0, 0], 2) == 0.0
    with pytest.raises(ContractError):
        mt.top_k_set([1, 2], 3)
    with pytest.raises(ContractError):
        mt.top_k_overlap([1, 2], [1, 2, 3], 1)


def test_top_k_against_brute_force_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m = int(rng.integers(1, 30))
        k = int(rng.integers(1, m + 1))
        # small integer values force plenty of ties
        x, x2 = rng.integers(-3, 4, size=m).astype(float), rng.normal(size=m)
        a, b = brute_top_k(x, k), brute_top_k(x2, k)
        assert set(mt.top_k_set(x, k).indices) == a
        assert mt.top_k_overlap(x, x2, k) == len(a & b) / k


# quarter-step grid: strictly monotone maps stay strictly monotone in float64
grid = st.integers(-20, 20).map(lambda i: i / 4)
vectors = st.integers(2, 12).flatmap(
    lambda m: st.tuples(
        st.lists(grid, min_size=m, max_size=m),
        st.lists(grid, min_size=m, max_size=m),
        st.integers(1, m),
    ))


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_overlap_properties(case):
    x, x2, k = case
    o = mt.top_k_overlap(x, x2, k)
    assert 0.0 <= o <= 1.0
    assert o == mt.top_k_overlap(x2, x, k)
    s = mt.top_k_set(x, k)
    assert len(s) == k
    inside = [x[i] for i in s.indices]
    outside = [x[i] for i in range(len(x)) if i not in s]
    assert not outside or min(inside) >= max(outside)
    # strictly monotone transform of both vectors keeps the sets
    assert mt.top_k_overlap(np.exp(np.asarray(x) / 2), np.asarray(x2) ** 3, k) == o


def test_overlap_rows_matches_scalar():
    rng = np.random.default_rng(4)
    X, Y = rng.normal(size=(20, 9)), rng.normal(size=(20, 9))
    rows = mt.top_k_overlap_rows(X, Y, 3)
    assert rows.tolist() == [mt.top_k_overlap(a, b, 3) for a, b in zip(X, Y)]


def test_mae():
    assert mt.mae([[1.0, 2.0]], [[1.0, 2.0]]).tolist() == [0.0, 0.0]
    assert mt.mae([1.5], [-1.0]).tolist() == [2.5]
    rng = np.random.default_rng(2)
    P, Y = rng.normal(size=(17, 2)), rng.normal(size=(17, 2))
    naive = [sum(abs(P[i, j] - Y[i, j]) for i in range(17)) / 17 for j in range(2)]
    np.testing.assert_allclose(mt.mae(P, Y), naive, rtol=1e-14)
    with pytest.raises(ContractError):
        mt.mae(np.zeros((0, 2)), np.zeros((0, 2)))


def test_thresholds_parse():
    t = mt.Thresholds.from_dict({"gamma1": "inf", "gamma2": 0.5})
    assert t.gamma1 == math.inf and t.gamma2 == 0.5 and t.gamma4 == math.inf
    assert mt.Thresholds.from_dict(t.to_dict()) == t
    for bad in ({"gamma9": 1.0}, {"gamma1": "lots"}, {"gamma1": -1.0}, {"gamma1": True}):
        with pytest.raises(ValueError):
            mt.Thresholds.from_dict(bad)


# -- dependability audit ---------------------------------------------------------

def _gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def _linear_pair():
    """Two-concept models with linear encoders and the same head f(g) = 2 gelu(g_0)."""
    space = cbm.ConceptSpace(np.eye(2), ("left", "right"))
    dims = cbm.ModelDims(d=2, l=2, m=2, hidden=1, t=1, encoder_layers=1)

    def make(w):
        p = cbm.init_params(0, dims, space.id)
        p.tensors["enc.w0"].data = np.array(w, dtype=float)
        p.tensors["head.w0"].data = np.array([[1.0], [0.0]])
        p.tensors["head.w1"].data = np.array([[2.0]])
        return p

    data = [cbm.Sample([[1.0, 0.0]], [0.0]), cbm.Sample([[1.0, 1.0]], [0.0]), cbm.Sample([[0.0, 2.0]], [0.0])]
    return space, make([[1, 0], [0, 1]]), make([[1, 1], [0, 1]]), data


def test_dependability_hand_micro_instance():
    space, base, drive, data = _linear_pair()
    r2, r5 = math.sqrt(2), math.sqrt(5)
    # base scores: [1,0], [1/r2,1/r2], [0,1]; drive scores: [1/r2,1/r2], [1/r5,2/r5], [0,1]
    d1 = [(1 - 1 / r2), ((1 / r2 - 1 / r5) + (2 / r5 - 1 / r2)) / 2, 0.0]
    d3 = [abs(2 * _gelu(1 / r2) - 2 * _gelu(1.0)), abs(2 * _gelu(1 / r5) - 2 * _gelu(1 / r2)), 0.0]
    rep = mt.dependability_report(base, drive, space, data, PerturbationSpec("P1", sigma=0.0),
                                  mt.Thresholds(0.2, 0.0, 0.5, 0.0), k=1)
    assert rep.gamma[0] == pytest.approx(sum(d1) / 3, abs=1e-14)
    assert rep.gamma[2] == pytest.approx(sum(d3) / 3, abs=1e-14)
    assert rep.gamma[1] == 0.0 and rep.gamma[3] == 0.0
    assert rep.verdicts == {"Ci": True, "Si": True, "Co": True, "So": True}
    # top-1 sets: base {0},{0},{1}; drive {0},{1},{1}
    assert rep.overlap_ci == pytest.approx(2 / 3)
    tighter = mt.dependability_report(base, drive, space, data, PerturbationSpec("P1", sigma=0.0),
                                      mt.Thresholds(0.1, 0.0, 0.0, 0.0), k=1)
    assert tighter.verdicts == {"Ci": False, "Si": True, "Co": False, "So": True}
    assert not tighter.dependable


def test_identical_models_zero_gamma():
    space, base, _, data = _linear_pair()
    rep = mt.dependability_report(base, base, space, data, PerturbationSpec("P1", sigma=0.0),
                                  mt.Thresholds(0.0, 0.0, 0.0, 0.0), k=1)
    assert rep.gamma == (0.0, 0.0, 0.0, 0.0)
    assert rep.dependable


def test_verdicts_monotone_and_vacuous():
    space, base, drive, data = _linear_pair()
    spec = PerturbationSpec("P3", sigma=0.05, seed=1)
    rep = mt.dependability_report(base, drive, space, data, spec, mt.Thresholds(), k=1)
    assert rep.dependable and all(g >= 0 for g in rep.gamma)
    prev = None
    for t in np.linspace(0.0, 0.5, 10):
        rep.thresholds = mt.Thresholds(t, t, t, t)
        v = rep.verdicts
        if prev:
            assert all(v[k] or not prev[k] for k in v)
        prev = v


def test_binding_mismatch():
    space, base, drive, data = _linear_pair()
    drive.concept_space_ref = "elsewhere"
    with pytest.raises(cbm.BindingError):
        mt.dependability_report(base, drive, space, data, PerturbationSpec("P1", sigma=0.0), mt.Thresholds(), 1)
