"""Error metrics between mesh sequences and the least-squares comparison fit."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .library import JawPose, ShapeLibrary, skin_positions, unskin_point

logger = logging.getLogger(__name__)


class CompareError(ValueError):
    pass


@dataclass
class CompareReport:
    method: str
    rms: np.ndarray  # (T,)
    max: np.ndarray  # (T,)
    per_vertex: np.ndarray  # (T, V) distances
    bundle_residuals: list = field(default_factory=list)  # per frame: name -> residual

    def summary(self) -> dict:
        out = {"method": self.method, "frames": int(len(self.rms)),
               "rms_mean": float(np.mean(self.rms)) if len(self.rms) else 0.0,
               "rms_max": float(np.max(self.rms)) if len(self.rms) else 0.0,
               "max": float(np.max(self.max)) if len(self.max) else 0.0}
        if self.bundle_residuals:
            r = [v for fr in self.bundle_residuals for v in fr.values()]
            out["bundle_residual_mean"] = float(np.mean(r)) if r else 0.0
            out["bundle_residual_max"] = float(np.max(r)) if r else 0.0
        return out

    def save(self, path):
        """JSON report plus the per-vertex errors as an ``.npy`` sidecar."""
        path = Path(path)
        sidecar = path.with_suffix(".per_vertex.npy")
        np.save(sidecar, self.per_vertex)
        data = {"summary": self.summary(), "rms": self.rms.tolist(), "max": self.max.tolist(),
                "bundle_residuals": self.bundle_residuals, "per_vertex": sidecar.name}
        path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def compare_sequences(a, b, method: str = "", bundle_residuals=None) -> CompareReport:
    """Per-frame RMS and max vertex distance between two (T, V, 3) sequences."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape != b.shape:
        raise CompareError(f"topology mismatch: {a.shape} vs {b.shape}")
    d = np.linalg.norm(a - b, axis=2)
    rms = np.sqrt(np.mean(d * d, axis=1))
    return CompareReport(method, rms, d.max(axis=1), d, list(bundle_residuals or []))


def fit_blendshapes_ls(lib: ShapeLibrary, observed: dict, theta: JawPose):
    """Unconstrained least-squares shape weights from bundle positions.

    Solves the normal equations ``(A^T A) w = A^T y`` where column ``n`` of
    ``A`` stacks every observed bundle's unskinned displacement on shape
    ``n``.  Returns ``(weights (S,), dense positions)``.
    """
    names = sorted(observed)
    if not names or not lib.shapes:
        return np.zeros(len(lib.shapes)), skin_positions(lib, lib.x0, theta)
    S = lib.unskinned_stack()
    A = np.zeros((3 * len(names), len(lib.shapes)))
    y = np.zeros(3 * len(names))
    for r, name in enumerate(names):
        b = lib.bundle(name)
        vids = lib.neutral.faces[b.attach.face]
        bary = np.asarray(b.attach.bary)
        A[3 * r:3 * r + 3] = np.einsum("k,skc->cs", bary, S[:, vids])
        rest = bary @ lib.x0[vids]
        y[3 * r:3 * r + 3] = unskin_point(lib, b.attach, observed[name], theta) - rest
    N = A.T @ A
    rhs = A.T @ y
    try:
        w = np.linalg.solve(N, rhs)
    except np.linalg.LinAlgError:
        logger.warning("normal equations singular; using the pseudo-inverse")
        w = np.linalg.pinv(N) @ rhs
    dense = skin_positions(lib, lib.x0 + np.einsum("s,svc->vc", w, S), theta)
    return w, dense
