"""Point clouds, tetrahedra, the uniform grid, queries and the LGI1 cache."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facerecon.index import (INDEX_MAGIC, CombinatorialCapExceeded,
                             IndexFormatError, PruneConfig, QualityConfig,
                             bin_clouds_by_jaw, brute_force_containing, build_bundle_index,
                             build_cloud, build_grid, build_index, enumerate_tets, load_index,
                             project_to_index, projection_candidates, prune_index,
                             query_containing, save_index, tet_weights)
from facerecon.library import NEUTRAL, JawPose, Shape, ShapeLibrary, eval_bundle
from facerecon.mesh import closest_point_on_simplex

from helpers import cloud_of, toy_library
from oracles import containing_by_inverse, exact_simplex_distances


def random_index(seed=0, n=12, quality=None):
    rng = np.random.default_rng(seed)
    return build_bundle_index(cloud_of(rng.normal(size=(n, 3))), quality or QualityConfig.disabled())


TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
# regular tetrahedron standing on a face; passes the default quality filter
REGULAR = np.array([[0, 0, 0], [1, 0, 0], [0.5, math.sqrt(3) / 2, 0],
                    [0.5, math.sqrt(3) / 6, math.sqrt(2 / 3)]])


# -- clouds --------------------------------------------------------------------

def test_region_tags_exclude_shape():
    lib = toy_library(tags=[["lower"], ["upper"], ["upper"], ["lower"], ["upper"]],
                      bundle_tags=["upper"])
    cloud = build_cloud(lib, lib.bundles[0], PruneConfig(0.0, 0.0))
    assert [p.shape for p in cloud.points] == [NEUTRAL, "s1", "s2", "s4"]


def test_empty_library_gives_neutral_only():
    lib = toy_library(n_shapes=0)
    cloud = build_cloud(lib, lib.bundles[0])
    assert len(cloud.points) == 1 and cloud.points[0].shape == NEUTRAL


def test_duplicate_shapes_collapse():
    lib = toy_library(n_shapes=2)
    dup = Shape("copy", lib.shapes[0].disp + 1e-7)
    lib2 = ShapeLibrary(lib.neutral, lib.shapes + [dup], lib.bundles, lib.skin_weights,
                        lib.jaw_model)
    cloud = build_cloud(lib2, lib2.bundles[0])
    assert [p.shape for p in cloud.points] == [NEUTRAL, "s0", "s1"]


def test_small_displacement_pruned():
    lib = toy_library(n_shapes=2)
    tiny = Shape("tiny", np.full_like(lib.x0, 1e-6))
    lib2 = ShapeLibrary(lib.neutral, lib.shapes + [tiny], lib.bundles, lib.skin_weights,
                        lib.jaw_model)
    assert "tiny" not in [p.shape for p in build_cloud(lib2, lib2.bundles[0]).points]


def test_cloud_points_are_unskinned_evaluations():
    lib = toy_library(skin=0.7, jaw=[JawPose(0.1 * k, 0.3, 0) for k in range(5)])
    names = [b.name for b in lib.bundles]
    adj = {names[0]: names[1:3]}
    cloud = build_cloud(lib, lib.bundles[0], PruneConfig(0.0, 0.0), adj)
    for p in cloud.points:
        w = {} if p.shape == NEUTRAL else {p.shape: 1.0}
        np.testing.assert_allclose(p.pos, eval_bundle(lib, lib.bundles[0], w), atol=1e-12)
        assert sorted(p.neighbor_evals) == names[1:3]
        for nb, pos in p.neighbor_evals.items():
            np.testing.assert_allclose(pos, eval_bundle(lib, lib.bundle(nb), w), atol=1e-12)


# -- tetrahedra ------------------------------------------------------------------

def test_single_tet():
    ts = enumerate_tets(cloud_of(REGULAR))
    assert ts.tets.tolist() == [[0, 1, 2, 3]] and not ts.too_small


def test_coplanar_points_too_small():
    ts = enumerate_tets(cloud_of([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]))
    assert len(ts) == 0 and ts.too_small


def test_ten_points_all_combinations():
    rng = np.random.default_rng(1)
    ts = enumerate_tets(cloud_of(rng.normal(size=(10, 3))), QualityConfig.disabled())
    assert len(ts) == math.comb(10, 4) == 210
    assert np.all(np.diff(ts.tets, axis=1) > 0)
    assert len({tuple(t) for t in ts.tets.tolist()}) == 210


def test_quality_filter_respected():
    rng = np.random.default_rng(4)
    cloud = cloud_of(rng.normal(size=(14, 3)))
    q = QualityConfig(1e-3, 8.0, 0.6)
    ts = enumerate_tets(cloud, q)
    d = cloud.diagonal()
    vol, aspect, longest = ts.quality.T
    assert 0 < len(ts) < math.comb(14, 4)
    assert np.all(vol >= q.min_vol_frac * d ** 3)
    assert np.all(aspect <= q.max_aspect) and np.all(longest <= q.max_extent_frac * d)


def test_combinatorial_cap_names_bundle():
    rng = np.random.default_rng(0)
    cloud = cloud_of(rng.normal(size=(61, 3)), name="forehead")
    with pytest.raises(CombinatorialCapExceeded) as exc:
        enumerate_tets(cloud)
    assert exc.value.n_tets == math.comb(61, 4) > 250_000
    assert "forehead" in str(exc.value) and "--jaw-bins" in str(exc.value)


def test_blacklisted_tets_skipped():
    rng = np.random.default_rng(1)
    cloud = cloud_of(rng.normal(size=(6, 3)))
    ts = enumerate_tets(cloud, QualityConfig.disabled(), blacklist=[(3, 1, 0, 2)])
    assert [0, 1, 2, 3] not in ts.tets.tolist() and len(ts) == 14


# -- grid --------------------------------------------------------------------------

def test_one_tet_one_cell():
    cloud = cloud_of(REGULAR)
    g = build_grid(enumerate_tets(cloud), cloud)
    assert g.dims.tolist() == [1, 1, 1] and g.cell_items(0).tolist() == [0]


def test_spanning_tet_in_every_cell():
    rng = np.random.default_rng(2)
    inner = rng.uniform(0.2, 0.8, (30, 3))
    big = np.array([[-1, -1, -1], [3, -1, -1], [-1, 3, -1], [-1, -1, 3]], dtype=float)
    pts = np.vstack([big, inner])
    cloud = cloud_of(pts)
    ts = enumerate_tets(cloud, QualityConfig.disabled(), cap=10**6)
    g = build_grid(ts, cloud)
    assert np.prod(g.dims) > 1
    big_id = ts.tets.tolist().index([0, 1, 2, 3])
    lo, hi = pts[:4].min(axis=0), pts[:4].max(axis=0)
    for cell in range(int(np.prod(g.dims))):
        c = np.unravel_index(cell, g.dims)
        centre = g.lo + (np.array(c) + 0.5) * (g.hi - g.lo) / g.dims
        if np.all(centre >= lo) and np.all(centre <= hi):
            assert big_id in g.cell_items(cell)


def test_grid_dims_formula():
    idx = random_index(n=12)
    m = len(idx.tetset)
    base = min(max(math.ceil(round((m / 8) ** (1 / 3), 12)), 1), 64)
    assert np.all(idx.grid.dims <= base) and np.all(idx.grid.dims >= 1)
    assert len(idx.grid.items) <= 64 * m


def test_grid_cells_cover_bruteforce():
    idx = random_index(seed=3, n=14)
    rng = np.random.default_rng(0)
    for p in rng.uniform(idx.grid.lo, idx.grid.hi, (100, 3)):
        cand = set(idx.grid.cell_items(idx.grid.cell_of(p)).tolist())
        assert set(brute_force_containing(idx, p).tolist()) <= cand


# -- containment ------------------------------------------------------------------

def test_vertex_query_hits_incident_tets():
    idx = random_index(seed=5, n=9)
    v = 4
    ids, W = query_containing(idx, idx.points[v])
    incident = [k for k, t in enumerate(idx.tetset.tets.tolist()) if v in t]
    # all incident tets contain their own vertex; others may too when it lies inside them
    assert set(incident) <= set(ids.tolist())
    for k, w in zip(ids, W):
        t = idx.tetset.tets[k].tolist()
        if v in t:
            assert w[t.index(v)] == pytest.approx(1.0, abs=1e-9)


def test_far_query_is_empty():
    idx = random_index()
    ids, W = query_containing(idx, np.array([100.0, 0, 0]))
    assert len(ids) == 0 and W.shape == (0, 4)


def test_grid_query_equals_bruteforce():
    idx = random_index(seed=6, n=13)
    rng = np.random.default_rng(1)
    P = idx.points
    for p in rng.uniform(P.min(axis=0), P.max(axis=0), (1000, 3)):
        ids, W = query_containing(idx, p)
        np.testing.assert_array_equal(ids, brute_force_containing(idx, p))
        if len(ids):
            assert np.all(W >= 0)
            np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)


def test_containment_matches_inverse_oracle():
    idx = random_index(seed=8, n=9)
    rng = np.random.default_rng(2)
    T = idx.tet_points
    for p in rng.uniform(idx.points.min(axis=0), idx.points.max(axis=0), (200, 3)):
        W = np.array([tet_weights(T[k:k + 1], p)[0] for k in range(len(T))])
        if np.any(np.abs(W) < 1e-7):
            continue  # too close to a face for two solvers to agree on the sign
        np.testing.assert_array_equal(query_containing(idx, p)[0], containing_by_inverse(p, T))


# -- projection -------------------------------------------------------------------

def test_projection_inside_is_zero():
    idx = build_bundle_index(cloud_of(TET), QualityConfig.disabled())
    pr = project_to_index(idx, np.array([0.1, 0.2, 0.3]))
    assert pr.simplex == (0, 1, 2, 3) and pr.distance == 0.0
    np.testing.assert_allclose(pr.weights, [0.4, 0.1, 0.2, 0.3], atol=1e-15)


def test_projection_single_point_cloud():
    idx = build_bundle_index(cloud_of([[1.0, 2.0, 3.0]]))
    pr = project_to_index(idx, np.array([4.0, 6.0, 3.0]))
    assert pr.simplex == (0,) and pr.distance == pytest.approx(5.0)
    np.testing.assert_array_equal(pr.weights, [1.0])


def test_projection_degenerate_cloud_uses_triangles():
    idx = build_bundle_index(cloud_of([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]))
    assert idx.tetset.too_small and idx.grid is None
    pr = project_to_index(idx, np.array([0.25, 0.25, 2.0]))
    assert pr.distance == pytest.approx(2.0) and len(pr.simplex) == 3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_projection_matches_bruteforce(seed):
    idx = random_index(seed=seed % 7, n=10)
    rng = np.random.default_rng(seed)
    p = rng.normal(size=3) * 4.0
    pr = project_to_index(idx, p)
    exact = exact_simplex_distances(p, idx.tet_points)
    per_tet = min(np.linalg.norm(closest_point_on_simplex(p, T)[0] - p) for T in idx.tet_points)
    assert abs(pr.distance - exact.min()) <= 1e-9
    assert abs(pr.distance - per_tet) <= 1e-9
    np.testing.assert_allclose(pr.weights @ idx.points[list(pr.simplex)], pr.point, atol=1e-12)
    assert np.all(pr.weights >= 0) and abs(pr.weights.sum() - 1) <= 1e-9


def test_projection_ties_in_canonical_order():
    idx = random_index(seed=2, n=8)
    far = idx.points[0] + 100 * (idx.points[0] - idx.points.mean(axis=0))
    cands = projection_candidates(idx, far)
    assert [c.simplex for c in cands] == sorted(c.simplex for c in cands)


# -- jaw bins -------------------------------------------------------------------------

def test_single_bin_equals_unbinned():
    lib = toy_library()
    b = lib.bundles[0]
    (binned,) = bin_clouds_by_jaw(lib, b, [])
    plain = build_cloud(lib, b)
    assert [p.shape for p in binned.points] == [p.shape for p in plain.points]
    np.testing.assert_array_equal(binned.positions, plain.positions)


def test_bins_split_by_rotation():
    lib = toy_library(n_shapes=2, jaw=[JawPose(0.1), JawPose(0.3)], skin=0.5)
    low, high = bin_clouds_by_jaw(lib, lib.bundles[0], [0.2])
    assert [p.shape for p in low.points] == [NEUTRAL, "s0"]
    assert [p.shape for p in high.points] == [NEUTRAL, "s1"]
    # unskinned positions regardless of bin
    np.testing.assert_allclose(high.points[1].pos, eval_bundle(lib, lib.bundles[0], {"s1": 1.0}))


def test_bins_partition_shapes():
    rng = np.random.default_rng(3)
    lib = toy_library(n_shapes=5, jaw=[JawPose(r) for r in rng.uniform(0, 0.4, 5)], skin=0.5)
    b = lib.bundles[1]
    clouds = bin_clouds_by_jaw(lib, b, [0.1, 0.2, 0.3])
    union = sorted({p.shape for c in clouds for p in c.points} - {NEUTRAL})
    assert union == sorted({p.shape for p in build_cloud(lib, b).points} - {NEUTRAL})
    assert all(c.points[0].shape == NEUTRAL for c in clouds)


def test_for_bundle_selects_bin():
    lib = toy_library(n_shapes=4, jaw=[JawPose(0.05), JawPose(0.1), JawPose(0.3), JawPose(0.35)],
                      skin=0.5)
    idx = build_index(lib, {}, bin_edges=[0.2])
    name = lib.bundles[0].name
    assert idx.for_bundle(name, 0.1)[0] == 0 and idx.for_bundle(name, 0.2)[0] == 1
    assert idx.for_bundle(name, 1.0)[0] == 1


# -- whole index, pruning and the cache ----------------------------------------------

def test_build_is_deterministic(small_synth, small_ctx, tmp_path):
    a = build_index(small_synth.library, small_ctx.adjacency)
    b = build_index(small_synth.library, small_ctx.adjacency)
    save_index(a, tmp_path / "a.lgi")
    save_index(b, tmp_path / "b.lgi")
    assert (tmp_path / "a.lgi").read_bytes() == (tmp_path / "b.lgi").read_bytes()


def test_lgi1_round_trip_is_bit_exact(small_index, tmp_path):
    idx = small_index
    idx.bundles["b00"][0].usage[:3] = [5, 0, 2]
    save_index(idx, tmp_path / "x.lgi")
    data = (tmp_path / "x.lgi").read_bytes()
    assert data[:4] == INDEX_MAGIC
    back = load_index(tmp_path / "x.lgi")
    save_index(back, tmp_path / "y.lgi")
    assert (tmp_path / "y.lgi").read_bytes() == data
    for name, entries in idx.bundles.items():
        for a, b in zip(entries, back.bundles[name]):
            np.testing.assert_array_equal(a.points, b.points)
            np.testing.assert_array_equal(a.neighbor_evals, b.neighbor_evals)
            np.testing.assert_array_equal(a.tetset.tets, b.tetset.tets)
            np.testing.assert_array_equal(a.tetset.quality, b.tetset.quality)
            np.testing.assert_array_equal(a.usage, b.usage)
            np.testing.assert_array_equal(a.grid.items, b.grid.items)
            assert [p.shape for p in a.cloud.points] == [p.shape for p in b.cloud.points]
    assert back.adjacency == idx.adjacency
    idx.bundles["b00"][0].usage[:] = 0


def test_load_rejects_corruption(small_index, tmp_path):
    save_index(small_index, tmp_path / "x.lgi")
    data = (tmp_path / "x.lgi").read_bytes()
    (tmp_path / "bad.lgi").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(IndexFormatError):
        load_index(tmp_path / "bad.lgi")
    (tmp_path / "long.lgi").write_bytes(data + b"\0")
    with pytest.raises(IndexFormatError):
        load_index(tmp_path / "long.lgi")
    (tmp_path / "short.lgi").write_bytes(data[:-7])
    with pytest.raises(IndexFormatError):
        load_index(tmp_path / "short.lgi")


def test_prune_by_usage_and_blacklist(small_synth, small_ctx):
    idx = build_index(small_synth.library, small_ctx.adjacency)
    bi = idx.bundles["b01"][0]
    bi.usage[[0, 1, 2]] = [3, 1, 7]
    keep = [tuple(bi.tetset.tets[k]) for k in (0, 1, 2)]
    pruned = prune_index(idx, min_usage=1, blacklist={"b01": [keep[1]]})
    got = [tuple(t) for t in pruned.bundles["b01"][0].tetset.tets.tolist()]
    assert got == [keep[0], keep[2]]
    assert pruned.bundles["b01"][0].usage.tolist() == [3, 7]
    assert keep[1] in pruned.bundles["b01"][0].blacklist
    assert len(pruned.bundles["b00"][0].tetset) == 0
