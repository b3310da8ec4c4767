"""Per-frame shape weights for every bundle.

Each observed bundle is unskinned, located among the overlapping
tetrahedra of its cloud, and turned into convex shape weights.  When several
tetrahedra contain it, the one sharing most points with the previous frame's
choice wins, then the one that best explains the neighbouring bundles.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .index import BundleIndex, LGIndex, projection_candidates, query_containing
from .library import NEUTRAL, JawPose, ShapeLibrary, eval_bundle, unskin_point

DEFAULT_TOL = 1e-8  # relative to the library bounding-box diagonal
SNAP_REL = 1e-9  # relative to the cloud diagonal


class SolverError(ValueError):
    pass


@dataclass
class BundleSolution:
    bundle: str
    simplex: tuple
    weights_on_points: np.ndarray
    shape_weights: dict
    projected: bool = False
    residual: float = 0.0
    tet: int | None = None  # row in the tet set, None for snaps and lower simplices
    bin: int = 0

    def as_dict(self):
        return {"bundle": self.bundle, "simplex": list(self.simplex),
                "weights_on_points": [float(w) for w in self.weights_on_points],
                "shape_weights": dict(sorted(self.shape_weights.items())),
                "projected": bool(self.projected), "residual": float(self.residual),
                "bin": self.bin}


@dataclass
class FrameSolution:
    frame: int
    per_bundle: dict
    theta: JawPose = field(default_factory=JawPose)

    def as_dict(self):
        return {"frame": self.frame, "theta": self.theta.as_dict(),
                "bundles": [self.per_bundle[k].as_dict() for k in sorted(self.per_bundle)]}


def neutral_solution(name) -> BundleSolution:
    return BundleSolution(name, (0,), np.ones(1), {NEUTRAL: 1.0})


def shape_weights_of(index: BundleIndex, simplex, weights) -> dict:
    out = {}
    for i, w in zip(simplex, weights):
        if w > 0.0:
            name = index.cloud.points[i].shape
            out[name] = out.get(name, 0.0) + float(w)
    total = sum(out.values())
    return {k: v / total for k, v in out.items()}


# -- ranking --------------------------------------------------------------

def neighbor_scores(index: BundleIndex, simplices, weights, observed_neighbors: dict) -> np.ndarray:
    """RMS distance between predicted and observed neighbour positions.

    ``simplices`` is (k, m) cloud point ids and ``weights`` the matching
    (k, m) convex weights.  Neighbours not observed are skipped.
    """
    simplices = np.asarray(simplices, dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    cols = [j for j, nb in enumerate(index.cloud.neighbors) if nb in observed_neighbors]
    if not cols:
        return np.zeros(len(simplices))
    obs = np.array([observed_neighbors[index.cloud.neighbors[j]] for j in cols])
    N = index.neighbor_evals[:, cols]  # (n, c, 3)
    pred = np.einsum("km,kmcd->kcd", weights, N[simplices])
    return np.sqrt(np.mean(np.sum((pred - obs) ** 2, axis=2), axis=1))


def neighbor_score(index: BundleIndex, simplex, weights, observed_neighbors: dict) -> float:
    return float(neighbor_scores(index, [simplex], [weights], observed_neighbors)[0])


def temporal_priority(simplex, prev: BundleSolution | None) -> int:
    if prev is None:
        return 0
    return len(set(int(i) for i in simplex) & set(int(i) for i in prev.simplex))


def _rank(simplices, priorities, scores) -> int:
    """Index of the best candidate: priority DESC, score ASC, simplex ASC."""
    order = sorted(range(len(simplices)),
                   key=lambda k: (-priorities[k], scores[k], tuple(simplices[k])))
    return order[0]


def select_candidate(index: BundleIndex, p, observed_neighbors: dict | None = None,
                     prev: BundleSolution | None = None, temporal: bool = True,
                     snap_tol: float | None = None) -> BundleSolution:
    """Locate an unskinned bundle position in its cloud.

    A position within ``snap_tol`` of a cloud point snaps to that point.
    Otherwise the containing tetrahedra are ranked; when none contains the
    position, the closest simplices (ties within 1e-9 in distance)
    are ranked the same way.  ``residual`` here is the distance in the
    unskinned frame.
    """
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise SolverError(f"bundle {index.bundle}: non-finite position")
    observed_neighbors = observed_neighbors or {}
    P = index.points
    d = np.linalg.norm(P - p, axis=1)
    if snap_tol is None:
        snap_tol = SNAP_REL * max(index.diag, 1e-300)
    i = int(np.argmin(d))
    if d[i] <= snap_tol:
        return BundleSolution(index.bundle, (i,), np.ones(1),
                              {index.cloud.points[i].shape: 1.0}, False, float(d[i]))

    ids, W = query_containing(index, p)
    if len(ids):
        simplices = index.tetset.tets[ids]
        if temporal and prev is not None:
            prio = np.isin(simplices, np.asarray(prev.simplex)).sum(axis=1)
        else:
            prio = np.zeros(len(ids), dtype=np.int64)
        scores = neighbor_scores(index, simplices, W, observed_neighbors)
        # ids ascend with the canonical tet order, so they break the last ties
        k = int(np.lexsort((ids, scores, -prio))[0])
        simplex = tuple(int(x) for x in simplices[k])
        w = W[k]
        resid = float(np.linalg.norm(w @ P[list(simplex)] - p))
        return BundleSolution(index.bundle, simplex, w, shape_weights_of(index, simplex, w),
                              False, resid, int(ids[k]))

    cands = projection_candidates(index, p)
    prio = [temporal_priority(c.simplex, prev) if temporal else 0 for c in cands]
    scores = [neighbor_score(index, c.simplex, c.weights, observed_neighbors) for c in cands]
    c = cands[_rank([c.simplex for c in cands], prio, scores)]
    tet = None
    if len(c.simplex) == 4 and len(index.tetset):
        row = np.flatnonzero(np.all(index.tetset.tets == np.array(c.simplex), axis=1))
        tet = int(row[0]) if len(row) else None
    return BundleSolution(index.bundle, c.simplex, np.asarray(c.weights),
                          shape_weights_of(index, c.simplex, c.weights), True, c.distance, tet)


# -- frames ---------------------------------------------------------------

def solve_frame(lib: ShapeLibrary, index: LGIndex, frame_bundles: dict, theta: JawPose,
                prev: FrameSolution | None = None, frame: int = 0, temporal: bool = True,
                tol: float = DEFAULT_TOL, record_usage: bool = True) -> FrameSolution:
    """Shape weights for every library bundle on one frame.

    ``frame_bundles`` maps bundle names to observed (skinned) positions;
    bundles absent from it get the neutral.  ``tol`` is relative to the
    library bounding-box diagonal and decides the ``projected`` flag, which
    is based on the residual measured against the observed position.
    """
    known = {b.name for b in lib.bundles}
    unknown = sorted(set(frame_bundles) - known)
    if unknown:
        raise SolverError(f"frame {frame}: unknown bundles {unknown}")
    missing = sorted(n for n in frame_bundles if n not in index.bundles)
    if missing:
        raise SolverError(f"frame {frame}: no index for bundles {missing}")
    abs_tol = tol * lib.bbox_diagonal()

    unskinned = {name: unskin_point(lib, lib.bundle(name).attach, p, theta)
                 for name, p in frame_bundles.items()}
    out = {}
    for b in lib.bundles:
        if b.name not in frame_bundles:
            out[b.name] = neutral_solution(b.name)
            continue
        k, bi = index.for_bundle(b.name, theta.rot)
        prev_sol = prev.per_bundle.get(b.name) if prev is not None else None
        if prev_sol is not None and prev_sol.bin != k:
            prev_sol = None
        sol = select_candidate(bi, unskinned[b.name], unskinned, prev_sol, temporal)
        sol.bin = k
        sol.residual = float(np.linalg.norm(
            eval_bundle(lib, b, sol.shape_weights, theta) - np.asarray(frame_bundles[b.name])))
        sol.projected = sol.residual > abs_tol
        if record_usage and sol.tet is not None:
            bi.usage[sol.tet] += np.uint64(1)
        out[b.name] = sol
    return FrameSolution(frame, out, theta)


def solve_track(lib: ShapeLibrary, index: LGIndex, frames: list, thetas: list,
                temporal: bool = True, tol: float = DEFAULT_TOL) -> list:
    if len(frames) != len(thetas):
        raise SolverError(f"{len(frames)} bundle frames but {len(thetas)} jaw poses")
    out, prev = [], None
    for f, (fb, th) in enumerate(zip(frames, thetas)):
        prev = solve_frame(lib, index, fb, th, prev, f, temporal, tol)
        out.append(prev)
    return out


def selection_changes(solutions: list) -> int:
    """Number of simplex vertices that change between consecutive frames."""
    total = 0
    for a, b in zip(solutions, solutions[1:]):
        for name, sb in b.per_bundle.items():
            sa = a.per_bundle.get(name)
            if sa is not None:
                total += len(set(sb.simplex) - set(sa.simplex))
    return total


def smooth_track(lib: ShapeLibrary, solutions: list, window: int = 5, observed: list | None = None,
                 tol: float = DEFAULT_TOL) -> list:
    """Central moving average of per-bundle shape weights.

    The window is truncated at the ends of the sequence and the jaw track
    is left alone.  With ``observed`` (per-frame bundle positions) the
    residuals are recomputed; otherwise they are kept.
    """
    if window < 1 or window % 2 == 0:
        raise SolverError(f"smoothing window must be a positive odd integer, got {window}")
    half = window // 2
    T = len(solutions)
    abs_tol = tol * lib.bbox_diagonal()
    out = []
    for f in range(T):
        lo, hi = max(0, f - half), min(T, f + half + 1)
        cur = solutions[f]
        per = {}
        for name, sol in cur.per_bundle.items():
            if half == 0:
                # renormalising a single frame would only perturb the last bits
                per[name] = replace(sol, shape_weights=dict(sol.shape_weights))
                if observed is not None and name in observed[f]:
                    per[name].residual = float(np.linalg.norm(eval_bundle(
                        lib, lib.bundle(name), sol.shape_weights, cur.theta) - observed[f][name]))
                    per[name].projected = per[name].residual > abs_tol
                continue
            acc = {}
            for g in range(lo, hi):
                for k, w in solutions[g].per_bundle[name].shape_weights.items():
                    acc[k] = acc.get(k, 0.0) + w
            total = sum(acc.values())
            sw = {k: v / total for k, v in sorted(acc.items()) if v > 0.0}
            new = replace(sol, shape_weights=sw)
            if observed is not None and name in observed[f]:
                new.residual = float(np.linalg.norm(
                    eval_bundle(lib, lib.bundle(name), sw, cur.theta) - observed[f][name]))
                new.projected = new.residual > abs_tol
            per[name] = new
        out.append(FrameSolution(cur.frame, per, cur.theta))
    return out


# -- files ----------------------------------------------------------------

def write_track(frames: list, path):
    """``frame,bundle,x,y,z`` rows, bundles sorted within each frame."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "bundle", "x", "y", "z"])
        for f, fb in enumerate(frames):
            for name in sorted(fb):
                x, y, z = fb[name]
                w.writerow([f, name, repr(float(x)), repr(float(y)), repr(float(z))])


def read_track(path, n_frames: int | None = None) -> list:
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for line, r in enumerate(reader, start=2):
            try:
                f = int(r["frame"])
                p = np.array([float(r["x"]), float(r["y"]), float(r["z"])])
            except (KeyError, TypeError, ValueError) as exc:
                raise SolverError(f"{path}:{line}: bad track row ({exc})") from None
            if f < 0 or not np.all(np.isfinite(p)):
                raise SolverError(f"{path}:{line}: bad frame index or non-finite position")
            rows.setdefault(f, {})[r["bundle"]] = p
    count = n_frames if n_frames is not None else (max(rows) + 1 if rows else 0)
    return [rows.get(f, {}) for f in range(count)]


def write_jaw_track(thetas: list, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "rot", "protrude", "lateral"])
        for f, t in enumerate(thetas):
            w.writerow([f, repr(t.rot), repr(t.protrude), repr(t.lateral)])


def read_jaw_track(path) -> list:
    out = {}
    with open(path, newline="") as fh:
        for line, r in enumerate(csv.DictReader(fh), start=2):
            try:
                out[int(r["frame"])] = JawPose(float(r["rot"]), float(r["protrude"]),
                                               float(r["lateral"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise SolverError(f"{path}:{line}: bad jaw row ({exc})") from None
    if sorted(out) != list(range(len(out))):
        raise SolverError(f"{path}: jaw frames must be contiguous from 0")
    return [out[f] for f in range(len(out))]


def write_solutions(solutions: list, path):
    data = [s.as_dict() for s in solutions]
    for d in data:
        for b in d["bundles"]:
            if not math.isfinite(b["residual"]):
                b["residual"] = None
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
