import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mflq.errors import ProblemFileError
from mflq.model import (ControlProcess, MarkMeasure, TimeGrid, apply_track, combine_coefficient,
                        contract_track, dump_problem, load_problem, make_spec, split_mean,
                        weighted_inner, weighted_norm)


def test_grid_points_and_weights():
    g = TimeGrid(0.0, 1.0, 0.25)
    assert g.size == 5
    np.testing.assert_allclose(g.points, [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(g.trapezoid_weights.sum(), 1.0)


def test_grid_rejects_bad_step():
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, -0.1)


def test_mark_measure_flattening():
    mk = MarkMeasure([[[0.5], [1.0]], [[2.0]]], [[1.0, 2.0], [0.5]])
    assert mk.num_components == 2
    assert mk.num_atoms == 3
    np.testing.assert_allclose(mk.intensities, [3.0, 0.5])
    np.testing.assert_array_equal(mk.atom_component, [0, 0, 1])
    vals = np.ones((3, 2))
    assert mk.fibre_norm_sq(vals) == pytest.approx(2 * 3.5)


def test_mark_measure_rejects_negative_weight():
    with pytest.raises(ValueError):
        MarkMeasure([[[0.0]]], [[-1.0]])


def test_make_spec_defaults():
    spec = make_spec(2, 1, 0, TimeGrid(0.0, 1.0, 0.1))
    assert spec.coeffs.A.shape == (11, 2, 2)
    np.testing.assert_array_equal(spec.cost.R[0], np.eye(1))
    assert spec.d == 0 and spec.marks.num_atoms == 0


def test_make_spec_rejects_unknown_name():
    with pytest.raises(ValueError, match="unknown"):
        make_spec(1, 1, 0, TimeGrid(0.0, 1.0, 0.1), Z=1.0)


def test_combine_coefficient():
    g = np.array([[1.0]])
    gb = np.array([[2.0]])
    assert combine_coefficient(g, gb, 1)[0, 0] == 1.0
    assert combine_coefficient(g, gb, 2)[0, 0] == 3.0


def test_weighted_norm_exponential_oracle():
    g = TimeGrid(0.0, 10.0, 1e-3)
    x = np.exp(-g.points)[None, :, None]
    # int_0^T e^{2Ks} e^{-2s} ds with K = 0.5
    exact = 1.0 - np.exp(-10.0)
    assert weighted_norm(x, 0.5, g) == pytest.approx(exact, rel=1e-6)
    exact0 = 0.5 * (1 - np.exp(-20.0))
    assert weighted_norm(x, 0.0, g) == pytest.approx(exact0, rel=1e-6)


def test_weighted_inner_symmetry(rng):
    g = TimeGrid(0.0, 1.0, 0.01)
    a = rng.standard_normal((5, g.size, 2))
    b = rng.standard_normal((5, g.size, 2))
    assert weighted_inner(a, b, 0.3, g) == pytest.approx(weighted_inner(b, a, 0.3, g))
    assert weighted_inner(a, a, 0.3, g) == pytest.approx(weighted_norm(a, 0.3, g))


def test_split_mean(rng):
    x = rng.standard_normal((50, 4, 2))
    fl, mean = split_mean(x)
    np.testing.assert_allclose(fl.mean(axis=0), 0.0, atol=1e-14)
    np.testing.assert_allclose(fl + mean, x)


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 1000))
def test_track_helpers_match_einsum(M, a, b, seed):
    r = np.random.default_rng(seed)
    G = 3
    mat = r.standard_normal((G, a, b))
    paths = r.standard_normal((M, G, b))
    np.testing.assert_allclose(apply_track(mat, paths), np.einsum("kab,mkb->mka", mat, paths),
                               atol=1e-13)
    y = r.standard_normal((M, G, a))
    np.testing.assert_allclose(contract_track(mat, y), np.einsum("kab,mka->mkb", mat, y), atol=1e-13)


def test_control_process_algebra():
    g = TimeGrid(0.0, 1.0, 0.5)
    u = ControlProcess.deterministic(np.ones((3, 1)), 4)
    v = (u + u).scale(0.5)
    np.testing.assert_array_equal(v.paths, u.paths)
    assert ControlProcess.zero(2, g, 1).paths.shape == (2, 3, 1)


def test_problem_roundtrip(tmp_path):
    g = TimeGrid(0.0, 2.0, 0.5)
    mk = MarkMeasure([[[0.3]]], [[1.5]])
    spec = make_spec(2, 1, 1, g, marks=mk, x0=[1.0, -1.0], K=0.2,
                     A=-np.eye(2), B=[[1.0], [0.5]], C=0.1 * np.eye(2), M=0.2 * np.eye(2),
                     Q=np.eye(2), R=2.0 * np.eye(1), S=[[0.1, 0.0]])
    path = tmp_path / "p.json"
    dump_problem(spec, path)
    back = load_problem(path)
    assert back.K == pytest.approx(0.2)
    for name in ("A", "B", "C", "M"):
        np.testing.assert_allclose(getattr(back.coeffs, name), getattr(spec.coeffs, name))
    for name in ("Q", "R", "S"):
        np.testing.assert_allclose(getattr(back.cost, name), getattr(spec.cost, name))
    assert back.marks == spec.marks


def test_load_problem_missing_file(tmp_path):
    with pytest.raises(ProblemFileError, match="file not found"):
        load_problem(tmp_path / "nope.json")


def test_load_problem_parse_error_has_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "dims": {"n": 1,,}\n}')
    with pytest.raises(ProblemFileError, match=r"bad.json:2:\d+"):
        load_problem(p)


def test_load_problem_missing_section(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"dims": {"n": 1, "m": 1}}))
    with pytest.raises(ProblemFileError, match="grid"):
        load_problem(p)
