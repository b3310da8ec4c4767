"""Sequence metrics and the least-squares blendshape fit."""
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facerecon.compare import CompareError, compare_sequences, fit_blendshapes_ls
from facerecon.library import REST_POSE, eval_bundle

from oracles import two_pass_errors


def test_identical_sequences():
    a = np.random.default_rng(0).normal(size=(4, 30, 3))
    r = compare_sequences(a, a.copy())
    assert np.all(r.rms == 0) and np.all(r.max == 0) and np.all(r.per_vertex == 0)


def test_one_vertex_offset():
    a = np.zeros((3, 25, 3))
    b = a.copy()
    b[1, 7] = [0.0, 3.0, 4.0]
    r = compare_sequences(a, b)
    assert r.max.tolist() == [0.0, 5.0, 0.0]
    assert r.rms[1] == pytest.approx(5.0 / np.sqrt(25), rel=1e-15)
    assert r.rms[0] == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_matches_two_pass(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 40, 3))
    b = a + rng.normal(scale=rng.uniform(1e-3, 1.0), size=a.shape)
    r = compare_sequences(a, b)
    rms, mx = two_pass_errors(a, b)
    np.testing.assert_allclose(r.rms, rms, rtol=1e-12)
    np.testing.assert_allclose(r.max, mx, rtol=1e-12)
    assert np.all(r.rms <= r.max)


def test_single_frame_input():
    r = compare_sequences(np.zeros((5, 3)), np.ones((5, 3)))
    assert r.rms.shape == (1,) and r.max[0] == pytest.approx(np.sqrt(3))


def test_topology_mismatch():
    with pytest.raises(CompareError, match="topology"):
        compare_sequences(np.zeros((2, 5, 3)), np.zeros((2, 6, 3)))


def test_save_writes_sidecar(tmp_path):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 10, 3))
    r = compare_sequences(a, a + 0.1, "nn", [{"b00": 0.0}, {"b00": 0.5}])
    r.save(tmp_path / "report.json")
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["summary"]["method"] == "nn"
    assert data["summary"]["bundle_residual_max"] == 0.5
    np.testing.assert_array_equal(np.load(tmp_path / data["per_vertex"]), r.per_vertex)


def test_lsq_reproduces_library_shape(small_synth):
    lib = small_synth.library
    diag = lib.bbox_diagonal()
    # a base and its two in-betweens share one bump and one bulge profile, so
    # only shapes outside a family have identifiable weights
    family = {n.split("_ib")[0] for n in lib.shape_names if "_ib" in n}
    family |= {n for n in lib.shape_names if "_ib" in n}
    for k, s in enumerate(lib.shapes):
        obs = {b.name: eval_bundle(lib, b, {s.name: 1.0}, s.jaw) for b in lib.bundles}
        w, dense = fit_blendshapes_ls(lib, obs, s.jaw)
        assert np.max(np.linalg.norm(dense - (lib.x0 + s.disp), axis=1)) <= 1e-8 * diag
        free = [j for j, n in enumerate(lib.shape_names) if n not in family]
        want = np.zeros(len(lib.shapes))
        want[k] = 1.0
        np.testing.assert_allclose(w[free], want[free], atol=1e-8)


def test_lsq_without_observations_is_rest(small_synth):
    lib = small_synth.library
    w, dense = fit_blendshapes_ls(lib, {}, REST_POSE)
    assert np.all(w == 0)
    np.testing.assert_array_equal(dense, lib.x0)
