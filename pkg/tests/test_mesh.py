"""Mesh container, OBJ I/O and the tetrahedron / simplex kernels."""
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from facerecon.mesh import (DegenerateTet, MeshError, SurfacePoint, TriMesh,
                            closest_point_on_simplex, eval_surface_point, load_obj, save_obj,
                            signed_volume, tet_barycentric, tet_contains)
from facerecon.synth import SynthConfig, make_sheet

from helpers import quad_mesh
from oracles import bary_by_inverse, exact_simplex_distances, sampled_simplex_distance

FROZEN = json.loads((Path(__file__).with_name("data") / "oracle_values.json").read_text())

coord = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
point = st.tuples(coord, coord, coord).map(np.array)

REG = np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])


def well_shaped(q):
    v = abs(signed_volume(*q))
    diag = np.linalg.norm(q.max(axis=0) - q.min(axis=0))
    return v > 1e-3 * diag ** 3


tet = st.tuples(point, point, point, point).map(np.array).filter(well_shaped)


# -- surface points ---------------------------------------------------------

def test_surface_point_vertex_case():
    m = quad_mesh()
    p = eval_surface_point(m.positions, m, SurfacePoint(1, (1.0, 0.0, 0.0)))
    np.testing.assert_array_equal(p, m.positions[0])


def test_surface_point_centroid():
    s = math.sqrt(3) / 2
    pos = np.array([[0, 0, 0], [1, 0, 0], [0.5, s, 0]])
    m = TriMesh(pos, np.array([[0, 1, 2]]), pos[:, :2] / np.array([1, s]))
    p = eval_surface_point(pos, m, SurfacePoint(0, (1 / 3, 1 / 3, 1 / 3)))
    np.testing.assert_allclose(p, pos.mean(axis=0), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_surface_point_matches_dot_product(seed):
    rng = np.random.default_rng(seed)
    m = make_sheet(SynthConfig(nx=6, ny=5))
    f = int(rng.integers(m.n_faces))
    b = rng.dirichlet(np.ones(3))
    got = eval_surface_point(m.positions, m, SurfacePoint(f, tuple(b)))
    want = sum(b[k] * m.positions[m.faces[f, k]] for k in range(3))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_surface_point_bad_face():
    m = quad_mesh()
    with pytest.raises(MeshError):
        eval_surface_point(m.positions, m, SurfacePoint(5, (1.0, 0.0, 0.0)))


def test_surface_point_rejects_bad_bary():
    with pytest.raises(MeshError):
        SurfacePoint(0, (0.5, 0.6, 0.0))


# -- mesh validation --------------------------------------------------------

def test_mesh_rejects_unreferenced_vertex():
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 0]], dtype=float)
    with pytest.raises(MeshError, match="not referenced"):
        TriMesh(pos, np.array([[0, 1, 2]]), pos[:, :2] / 5)


def test_mesh_rejects_degenerate_face():
    pos = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    with pytest.raises(MeshError):
        TriMesh(pos, np.array([[0, 1, 2]]), np.array([[0, 0], [0.5, 0], [1, 1]]))


def test_mesh_rejects_two_charts():
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 0, 0], [4, 0, 0], [3, 1, 0]], float)
    uv = np.array([[0, 0], [0.2, 0], [0, 0.2], [0.5, 0], [0.7, 0], [0.5, 0.2]])
    with pytest.raises(MeshError, match="chart"):
        TriMesh(pos, np.array([[0, 1, 2], [3, 4, 5]]), uv)


# -- tetrahedra -------------------------------------------------------------

def test_barycentric_vertex_case():
    np.testing.assert_allclose(tet_barycentric(REG[2], *REG), [0, 0, 1, 0], atol=1e-15)


def test_barycentric_centroid():
    np.testing.assert_allclose(tet_barycentric(REG.mean(axis=0), *REG), [0.25] * 4, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(tet, st.tuples(*[st.floats(0.01, 1)] * 4))
def test_barycentric_interior_matches_inverse(q, raw):
    w_true = np.array(raw) / sum(raw)
    p = w_true @ q
    w = tet_barycentric(p, *q)
    np.testing.assert_allclose(w, bary_by_inverse(p, q), atol=1e-8)
    diam = max(np.linalg.norm(a - b) for a in q for b in q)
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.linalg.norm(w @ q - p) <= 1e-10 * diam


@settings(max_examples=50, deadline=None)
@given(tet, point)
def test_partition_of_unity_anywhere(q, p):
    w = tet_barycentric(p, *q)
    assert abs(w.sum() - 1.0) <= 1e-12


def test_degenerate_tet_raises():
    q = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    with pytest.raises(DegenerateTet):
        tet_barycentric(np.zeros(3), *q)
    with pytest.raises(DegenerateTet):
        tet_contains(np.zeros(3), *q)


def test_contains_centroid_and_far_point():
    assert tet_contains(REG.mean(axis=0), *REG)
    assert not tet_contains(np.array([5.0, 5, 5]), *REG)


def test_contains_matches_sign_oracle():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(4, 3))
    for p in rng.uniform(q.min(axis=0) - 0.2, q.max(axis=0) + 0.2, (1000, 3)):
        assert tet_contains(p, *q) == bool(np.all(bary_by_inverse(p, q) >= -1e-9))


# -- closest point on simplex -------------------------------------------------

def test_closest_inside_tet_is_identity():
    p = np.array([0.1, 0.05, -0.1])
    q, w = closest_point_on_simplex(p, REG)
    np.testing.assert_array_equal(q, p)
    assert np.all(w > 0)


def test_closest_single_vertex():
    q, w = closest_point_on_simplex([3.0, 4, 5], [np.array([1.0, 1, 1])])
    np.testing.assert_array_equal(q, [1, 1, 1])
    np.testing.assert_array_equal(w, [1.0])


@pytest.mark.parametrize("case", range(len(FROZEN["simplex"])))
def test_closest_against_sampled_minimum(case):
    c = FROZEN["simplex"][case]
    verts = np.array(c["verts"])
    q, w = closest_point_on_simplex(c["p"], verts)
    d = np.linalg.norm(q - np.array(c["p"]))
    assert d <= c["sampled"] + 1e-12
    assert c["sampled"] - d <= 1e-3
    np.testing.assert_allclose(w @ verts, q, atol=1e-12)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
    if len(verts) == 4:
        assert abs(d - exact_simplex_distances(c["p"], verts[None])[0]) <= 1e-12


def test_sampled_oracle_freeze_is_reproducible():
    c = FROZEN["simplex"][3]
    assert sampled_simplex_distance(c["p"], c["verts"], seed=3) == c["sampled"]


@settings(max_examples=40, deadline=None)
@given(st.lists(point, min_size=1, max_size=4), point)
def test_closest_is_idempotent(verts, p):
    verts = np.array(verts)
    assume(len(verts) < 4 or well_shaped(verts))
    q, _ = closest_point_on_simplex(p, verts)
    q2, _ = closest_point_on_simplex(q, verts)
    scale = 1.0 + np.abs(verts).max()
    assert np.linalg.norm(q2 - q) <= 1e-9 * scale


@settings(max_examples=40, deadline=None)
@given(tet, point)
def test_containment_implies_projection_is_identity(q, p):
    if tet_contains(p, *q, tol=0.0):
        r, _ = closest_point_on_simplex(p, q)
        np.testing.assert_allclose(r, p, atol=1e-12)


# -- OBJ --------------------------------------------------------------------

def test_obj_round_trip_quad(tmp_path):
    m = quad_mesh()
    save_obj(m, None, tmp_path / "q.obj")
    back = load_obj(tmp_path / "q.obj")
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_allclose(back.positions, m.positions)
    np.testing.assert_allclose(back.uvs, m.uvs)


def test_obj_nine_significant_digits(tmp_path):
    m = make_sheet(SynthConfig(nx=5, ny=4))
    pos = m.positions + 1e-3 * np.pi
    save_obj(m, pos, tmp_path / "s.obj")
    back = load_obj(tmp_path / "s.obj")
    np.testing.assert_allclose(back.positions, pos, rtol=1e-8)


def test_obj_quad_face_names_line(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
                    "vt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nf 1 2 3 4\n")
    with pytest.raises(MeshError, match=r"bad\.obj:9: non-triangle"):
        load_obj(path)


def test_obj_missing_uvs(tmp_path):
    path = tmp_path / "nouv.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(MeshError, match="missing uvs"):
        load_obj(path)


def test_obj_parse_error_has_line(tmp_path):
    path = tmp_path / "junk.obj"
    path.write_text("v 0 0 0\nv 1 zero 0\n")
    with pytest.raises(MeshError, match=":2:"):
        load_obj(path)


def test_obj_face_sheet_counts(tmp_path):
    m = make_sheet(SynthConfig(nx=32, ny=64))
    save_obj(m, None, tmp_path / "face.obj")
    back = load_obj(tmp_path / "face.obj")
    assert (back.n_vertices, back.n_faces, len(back.uvs)) == (2048, 2 * 31 * 63, 2048)
