"""Compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from facerecon import _pykernels
from facerecon.blend import rasterize_uv, seed_texels
from facerecon.index import _edge_inverses
from facerecon.synth import SynthConfig, make_sheet

try:
    from facerecon import _kernels
except ImportError:  # extension not built
    _kernels = None


def march_case(resolution):
    mesh = make_sheet(SynthConfig())
    grid = rasterize_uv(mesh, resolution)
    uv = np.array([0.5, 0.5])
    idx, d = seed_texels(grid, grid.emb[grid.texel_of(uv)], uv)
    n = resolution * resolution
    covered = grid.covered.view(np.uint8)

    def run(impl):
        dist = np.full(n, np.inf)
        state = np.zeros(n, dtype=np.uint8)
        impl.march(grid.emb, covered, idx, d, dist, state)

    return f"march (fast marching, {resolution}x{resolution} texels)", run


def tets_case(m, seed=0):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(m, 4, 3))
    T = T[np.abs(np.linalg.det(T[:, 1:] - T[:, :1])) > 0.05]
    p = rng.normal(size=3) * 3.0

    def run(impl):
        impl.closest_on_tets(p, T)

    return f"closest_on_tets ({len(T)} tets)", run


def containing_case(m, seed=1):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(m, 4, 3))
    T = T[np.abs(np.linalg.det(T[:, 1:] - T[:, :1])) > 0.05]
    Minv = _edge_inverses(T)
    q0 = np.ascontiguousarray(T[:, 0])
    cand = np.arange(len(T), dtype=np.int64)
    P = rng.normal(size=(100, 3)) * 0.3

    def run(impl):
        for p in P:
            impl.tets_containing(p, q0, Minv, cand, 1e-9)

    return f"tets_containing (100 queries x {len(T)} tets)", run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    cases = [march_case(128), march_case(256), tets_case(5000), tets_case(25000),
             containing_case(25000)]
    print(f"{'kernel':<48} {'python s':>10} {'cython s':>10} {'speedup':>8}")
    for label, run in cases:
        t_py = min(timeit.repeat(lambda: run(_pykernels), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: run(_kernels), number=1, repeat=args.repeat))
        print(f"{label:<48} {t_py:>10.4f} {t_c:>10.4f} {t_py / t_c:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
