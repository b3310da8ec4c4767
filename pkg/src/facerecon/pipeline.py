"""Whole-sequence reconstruction with a choice of blending method."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blend import (BlendContext, BlendError, baseline_displacement_interp, blend_frame,
                    default_rbf_sigma, rbf_blend_field)
from .compare import fit_blendshapes_ls
from .index import LGIndex
from .library import ShapeLibrary, eval_bundles_on_positions
from .solver import DEFAULT_TOL, smooth_track, solve_track

METHODS = ("nn", "rbf", "baseline", "lsq")


@dataclass
class Reconstruction:
    method: str
    positions: np.ndarray  # (T, V, 3)
    solutions: list  # FrameSolutions, empty for methods that skip the solver
    residuals: list  # per frame: bundle name -> distance on the output surface


def surface_residuals(lib: ShapeLibrary, positions, observed: dict) -> dict:
    on = eval_bundles_on_positions(lib, positions)
    return {k: float(np.linalg.norm(on[k] - np.asarray(p))) for k, p in observed.items()}


def reconstruct(lib: ShapeLibrary, index: LGIndex | None, ctx: BlendContext, frames: list,
                thetas: list, method: str = "nn", window: int = 1, tol: float = DEFAULT_TOL,
                rbf_sigma: float | None = None, temporal: bool = True) -> Reconstruction:
    """Dense meshes for a bundle track.

    ``nn`` and ``rbf`` run the tetrahedral solver and differ only in how
    bundle weights spread over the surface; ``baseline`` interpolates raw
    bundle displacements; ``lsq`` fits all shapes globally.
    """
    if method not in METHODS:
        raise BlendError(f"unknown blend method {method!r}; choose from {METHODS}")
    sols = []
    if method in ("nn", "rbf"):
        if index is None:
            raise BlendError(f"method {method} needs an index")
        sols = solve_track(lib, index, frames, thetas, temporal, tol)
        if window > 1:
            sols = smooth_track(lib, sols, window, frames, tol)
        if method == "nn":
            field = ctx.nn
        else:
            sigma = rbf_sigma if rbf_sigma is not None else default_rbf_sigma(ctx.sites)
            field = rbf_blend_field(ctx.grid, ctx.fields, lib.neutral, sigma)
        out = [blend_frame(lib, s, field) for s in sols]
    elif method == "baseline":
        out = [baseline_displacement_interp(lib, fb, th, ctx.nn) for fb, th in zip(frames, thetas)]
    else:
        out = [fit_blendshapes_ls(lib, fb, th)[1] for fb, th in zip(frames, thetas)]
    positions = np.array(out).reshape(len(frames), len(lib.x0), 3)
    residuals = [surface_residuals(lib, p, fb) for p, fb in zip(positions, frames)]
    return Reconstruction(method, positions, sols, residuals)
