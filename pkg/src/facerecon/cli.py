"""Command-line interface.

Human-readable progress goes to stderr and a JSON summary to stdout.  Exit
codes: 0 success, 2 invalid input, 3 a quality threshold was not met.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import blend, compare, index, pipeline, solver, synth
from .library import LibraryError, eval_bundles_on_positions, load_library
from .mesh import MeshError, load_obj_positions, save_obj

logger = logging.getLogger("facerecon")

EXIT_OK, EXIT_INVALID, EXIT_THRESHOLD = 0, 2, 3

INPUT_ERRORS = (LibraryError, MeshError, solver.SolverError, index.IndexFormatError,
                index.CombinatorialCapExceeded, synth.SynthConfigError, compare.CompareError,
                blend.BlendError, FileNotFoundError, ValueError)


class ThresholdFailure(Exception):
    def __init__(self, message, payload):
        super().__init__(message)
        self.payload = payload


def _emit(payload):
    print(json.dumps(payload, indent=1, sort_keys=True, default=float))


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()] if text else []


def _frame_files(directory, prefix="frame"):
    files = sorted(Path(directory).glob(f"{prefix}_*.obj"))
    if not files:
        raise FileNotFoundError(f"no {prefix}_*.obj files in {directory}")
    return files


def _load_sequence(directory, n_vertices):
    return np.array([load_obj_positions(f, n_vertices) for f in _frame_files(directory)])


def _nn_and_adjacency(lib, args):
    """Natural-neighbour field and bundle graph, from the cache when given."""
    if args.nn:
        return blend.load_nn(args.nn)
    ctx = blend.build_blend_context(lib, args.resolution, args.blend_mode, args.threads)
    return ctx.nn, ctx.adjacency


# -- commands -------------------------------------------------------------

def cmd_synth(args):
    cfg = synth.SynthConfig(nx=args.nx, ny=args.ny, n_shapes=args.shapes,
                            n_inbetweens=args.inbetweens, n_bundles=args.bundles,
                            nonlinearity=args.nonlinearity, jaw_fraction=args.jaw_fraction,
                            n_frames=args.frames, n_heldout=args.heldout, seed=args.seed)
    result = synth.generate(cfg)
    paths = synth.write_synth(result, args.out)
    logger.info("wrote synthetic dataset to %s", args.out)
    _emit({k: str(v) for k, v in paths.items()})
    return EXIT_OK


def cmd_build_index(args):
    lib = load_library(args.library)
    nn, adjacency = _nn_and_adjacency(lib, args)
    prune = index.PruneConfig(args.min_disp, args.dedupe_eps)
    quality = index.QualityConfig(args.min_vol_frac, args.max_aspect, args.max_extent_frac)
    idx = index.build_index(lib, adjacency, prune, quality, _floats(args.jaw_bins), args.cap,
                            args.threads)
    index.save_index(idx, args.out)
    nn_path = Path(args.nn) if args.nn else Path(args.out).with_suffix(".lgnn")
    if not args.nn:
        blend.save_nn(nn, nn_path, adjacency)
    stats = {}
    for name, entries in idx.bundles.items():
        stats[name] = [{"points": len(bi.cloud.points), "tets": len(bi.tetset),
                        "grid": [int(d) for d in bi.grid.dims] if bi.grid else None,
                        "projection_only": bi.tetset.too_small or not len(bi.tetset)}
                       for bi in entries]
        for bi in entries:
            logger.info("%s: %d points, %d tets, grid %s", name, len(bi.cloud.points),
                        len(bi.tetset), "x".join(map(str, bi.grid.dims)) if bi.grid else "-")
    _emit({"index": str(args.out), "nn": str(nn_path), "bundles": stats})
    return EXIT_OK


def cmd_reconstruct(args):
    lib = load_library(args.library)
    idx = index.load_index(args.index)
    frames = solver.read_track(args.bundles)
    thetas = solver.read_jaw_track(args.jaw) if args.jaw else [solver.JawPose()] * len(frames)
    if len(frames) < len(thetas):
        frames += [{}] * (len(thetas) - len(frames))
    known = {b.name for b in lib.bundles}
    unknown = sorted({n for fb in frames for n in fb} - known)
    if unknown:
        raise solver.SolverError(f"track bundles not in the library: {unknown}")
    if args.blend == "rbf" or not args.nn:
        ctx = blend.build_blend_context(lib, args.resolution, args.blend_mode, args.threads)
    else:
        nn, adjacency = blend.load_nn(args.nn)
        ctx = blend.BlendContext(None, {}, None, adjacency, nn, blend.bundle_sites(lib))
    rec = pipeline.reconstruct(lib, idx, ctx, frames, thetas, args.blend, args.window, args.tol)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f, p in enumerate(rec.positions):
        save_obj(lib.neutral, p, out / f"frame_{f:04d}.obj")
    if rec.solutions:
        solver.write_solutions(rec.solutions, out / "solutions.json")
    if args.record_usage:
        index.save_index(idx, args.index)

    abs_tol = args.tol * lib.bbox_diagonal()
    grid = ctx.grid if ctx.grid is not None else blend.rasterize_uv(lib.neutral, args.resolution)
    quant = blend.texel_quantization_bound(lib, grid)
    projected = {}
    violations = []
    for f, sols in enumerate(rec.solutions):
        for name, sol in sols.per_bundle.items():
            if name not in frames[f]:
                continue
            if sol.projected:
                projected[f"{f}:{name}"] = sol.residual
            elif rec.residuals[f][name] > abs_tol + quant:
                violations.append((f, name, rec.residuals[f][name]))
    res = [v for fr in rec.residuals for v in fr.values()]
    payload = {"frames": len(frames), "method": args.blend, "out": str(out),
               "residual_mean": float(np.mean(res)) if res else 0.0,
               "residual_max": float(np.max(res)) if res else 0.0,
               "projected": len(projected), "interpolation_violations": len(violations)}
    logger.info("reconstructed %d frames, mean residual %.3g, %d projected bundles",
                len(frames), payload["residual_mean"], len(projected))
    if args.truth:
        truth = _load_sequence(args.truth, len(lib.x0))
        if len(truth) != len(rec.positions):
            raise compare.CompareError(f"truth has {len(truth)} frames, track {len(rec.positions)}")
        report = compare.compare_sequences(rec.positions, truth, args.blend, rec.residuals)
        report.save(out / "report.json")
        payload["compare"] = report.summary()
    if args.blend == "nn" and args.window == 1 and violations:
        raise ThresholdFailure(f"{len(violations)} contained bundles exceed the residual "
                               f"tolerance", payload)
    _emit(payload)
    return EXIT_OK


def cmd_roundtrip(args):
    lib = load_library(args.library)
    idx = index.load_index(args.index)
    nn, _ = _nn_and_adjacency(lib, args)
    diag = lib.bbox_diagonal()
    reachable = {p.shape for entries in idx.bundles.values() for bi in entries
                 for p in bi.cloud.points}
    shapes, failed = {}, []
    for s in lib.shapes:
        target = lib.x0 + s.disp
        if s.name not in reachable:
            shapes[s.name] = {"unreachable": True}
            failed.append(s.name)
            logger.warning("shape %s is in no bundle cloud", s.name)
            continue
        fb = eval_bundles_on_positions(lib, target)
        sol = solver.solve_frame(lib, idx, fb, s.jaw, temporal=False, tol=args.tol,
                                 record_usage=False)
        out = blend.blend_frame(lib, sol, nn)
        rep = compare.compare_sequences(out, target)
        rms, mx = float(rep.rms[0]), float(rep.max[0])
        ok = rms <= args.threshold * diag
        shapes[s.name] = {"rms": rms, "max": mx, "ok": ok}
        if not ok:
            failed.append(s.name)
        logger.info("%s: rms %.3g max %.3g%s", s.name, rms, mx, "" if ok else "  FAIL")
    payload = {"shapes": shapes, "failed": failed, "threshold": args.threshold * diag}
    if failed:
        raise ThresholdFailure(f"{len(failed)} shapes failed the round trip: {failed}", payload)
    _emit(payload)
    return EXIT_OK


def cmd_compare(args):
    a_files, b_files = _frame_files(args.a), _frame_files(args.b)
    if len(a_files) != len(b_files):
        raise compare.CompareError(f"{len(a_files)} frames vs {len(b_files)} frames")
    a = np.array([load_obj_positions(f) for f in a_files])
    b = np.array([load_obj_positions(f) for f in b_files])
    report = compare.compare_sequences(a, b, args.label)
    if args.out:
        report.save(args.out)
    _emit(report.summary())
    return EXIT_OK


def cmd_prune_index(args):
    idx = index.load_index(args.index)
    blacklist = {}
    if args.blacklist:
        for line in Path(args.blacklist).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, *ids = [x.strip() for x in line.split(",")]
            if len(ids) != 4:
                raise ValueError(f"blacklist line needs a bundle and 4 point ids: {line!r}")
            blacklist.setdefault(name, []).append(tuple(int(i) for i in ids))
    before = {n: sum(len(bi.tetset) for bi in e) for n, e in idx.bundles.items()}
    pruned = index.prune_index(idx, args.min_usage, blacklist)
    index.save_index(pruned, args.out or args.index)
    after = {n: sum(len(bi.tetset) for bi in e) for n, e in pruned.bundles.items()}
    _emit({"before": before, "after": after, "out": str(args.out or args.index)})
    return EXIT_OK


# -- parser ---------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="facerecon", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=solver.DEFAULT_TOL,
                   help="residual tolerance relative to the bounding-box diagonal")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def blend_opts(sp):
        sp.add_argument("--resolution", type=int, default=512)
        sp.add_argument("--blend-mode", choices=("uv", "mesh"), default="uv")
        sp.add_argument("--nn", help="natural-neighbour cache (.lgnn)")

    s = sub.add_parser("synth", help="generate a synthetic library and tracks")
    s.add_argument("--out", required=True)
    s.add_argument("--nx", type=int, default=32)
    s.add_argument("--ny", type=int, default=64)
    s.add_argument("--shapes", type=int, default=30)
    s.add_argument("--inbetweens", type=int, default=10)
    s.add_argument("--bundles", type=int, default=40)
    s.add_argument("--nonlinearity", type=float, default=4.0)
    s.add_argument("--jaw-fraction", type=float, default=0.3)
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--heldout", type=int, default=8)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-index", help="build the per-bundle tetrahedral index")
    s.add_argument("library")
    s.add_argument("--out", required=True)
    blend_opts(s)
    s.add_argument("--min-disp", type=float, help="absolute; default 1e-3 of the diagonal")
    s.add_argument("--dedupe-eps", type=float, help="absolute; default 1e-4 of the diagonal")
    s.add_argument("--min-vol-frac", type=float, default=1e-6)
    s.add_argument("--max-aspect", type=float, default=25.0)
    s.add_argument("--max-extent-frac", type=float, default=0.75)
    s.add_argument("--jaw-bins", help="comma-separated jaw rotation breakpoints")
    s.add_argument("--cap", type=int, default=index.DEFAULT_CAP)
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("reconstruct", help="reconstruct meshes from a bundle track")
    s.add_argument("library")
    s.add_argument("index")
    s.add_argument("--bundles", required=True, help="frame,bundle,x,y,z CSV")
    s.add_argument("--jaw", help="frame,rot,protrude,lateral CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--blend", choices=pipeline.METHODS, default="nn")
    s.add_argument("--truth", help="directory of ground-truth frame_*.obj")
    s.add_argument("--record-usage", action="store_true",
                   help="write tetrahedron usage counts back to the index")
    blend_opts(s)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("roundtrip", help="reconstruct every library shape from its bundles")
    s.add_argument("library")
    s.add_argument("index")
    s.add_argument("--threshold", type=float, default=1e-6,
                   help="allowed RMS relative to the bounding-box diagonal")
    blend_opts(s)
    s.set_defaults(func=cmd_roundtrip)

    s = sub.add_parser("compare", help="per-frame errors between two OBJ sequences")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--out")
    s.add_argument("--label", default="")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("prune-index", help="drop unused or blacklisted tetrahedra")
    s.add_argument("index")
    s.add_argument("--min-usage", type=int, default=1)
    s.add_argument("--blacklist", help="lines of bundle,i,j,k,l")
    s.add_argument("--out")
    s.set_defaults(func=cmd_prune_index)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        logger.error("--threads must be at least 1")
        return EXIT_INVALID
    try:
        return args.func(args)
    except ThresholdFailure as exc:
        logger.error("%s", exc)
        _emit(exc.payload)
        return EXIT_THRESHOLD
    except INPUT_ERRORS as exc:
        logger.error("%s", exc)
        _emit({"error": str(exc), "type": type(exc).__name__})
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
