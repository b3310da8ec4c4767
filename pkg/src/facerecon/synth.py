"""Synthetic face-like datasets for testing and benchmarking.

A dome-shaped rectangular sheet stands in for the face.  Base shapes are
sums of smooth bumps over a gentle global drift; in-betweens add a vertical
bulge proportional to ``w (1 - w)`` on top of a scaled base shape, which no
linear blend of the library can reproduce.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .library import (NEUTRAL, BundleDef, JawModel, JawPose, Shape, ShapeLibrary,
                      blended_transforms, eval_bundles_on_positions, save_library, skin_positions)
from .mesh import SurfacePoint, TriMesh, save_obj


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    nx: int = 32
    ny: int = 64
    width: float = 100.0
    height: float = 150.0
    n_shapes: int = 30
    n_inbetweens: int = 10
    inbetweens_per_family: int = 2
    n_bundles: int = 40
    nonlinearity: float = 4.0
    jaw_fraction: float = 0.3
    max_jaw_rot: float = 0.4
    n_frames: int = 60
    n_heldout: int = 8
    seed: int = 0

    def validate(self):
        if self.nx < 3 or self.ny < 3:
            raise SynthConfigError("vertex grid must be at least 3x3")
        if self.n_shapes < 2:
            raise SynthConfigError(f"need at least 2 shapes, got {self.n_shapes}")
        if not 0 <= self.n_inbetweens < self.n_shapes:
            raise SynthConfigError("in-betweens must leave at least one base shape")
        if self.inbetweens_per_family < 1:
            raise SynthConfigError("need at least one in-between per family")
        if self.n_bundles < 4:
            raise SynthConfigError(f"need at least 4 bundles, got {self.n_bundles}")
        if self.n_bundles > self.nx * self.ny:
            raise SynthConfigError("more bundles than vertices")
        if not 0.0 <= self.jaw_fraction <= 1.0:
            raise SynthConfigError("jaw fraction must lie in [0, 1]")
        if not 0.0 <= self.max_jaw_rot < np.pi / 2:
            raise SynthConfigError("max jaw rotation must lie in [0, pi/2)")
        if self.n_frames < 1 or self.n_heldout < 0:
            raise SynthConfigError("frame counts must be positive")


@dataclass
class Sequence:
    """Dense positions, exact bundle positions and jaw poses per frame."""

    positions: np.ndarray  # (T, V, 3)
    bundles: list  # per frame: name -> 3D position
    thetas: list  # per frame JawPose
    weights: list  # per frame: shape name -> weight (generating mixture)


@dataclass
class SynthResult:
    config: SynthConfig
    library: ShapeLibrary
    track: Sequence
    heldout: Sequence


# -- geometry -------------------------------------------------------------

def make_sheet(cfg: SynthConfig) -> TriMesh:
    xs = np.linspace(-cfg.width / 2, cfg.width / 2, cfg.nx)
    ys = np.linspace(-cfg.height / 2, cfg.height / 2, cfg.ny)
    X, Y = np.meshgrid(xs, ys)  # row-major in y
    R2 = (X / cfg.width) ** 2 + (Y / cfg.height) ** 2
    Z = 0.15 * cfg.width * (1.0 - 2.0 * R2)  # mild dome
    pos = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    uv = np.stack([(X - xs[0]) / cfg.width, (Y - ys[0]) / cfg.height], axis=-1).reshape(-1, 2)
    faces = []
    for j in range(cfg.ny - 1):
        for i in range(cfg.nx - 1):
            a = j * cfg.nx + i
            b, c, d = a + 1, a + cfg.nx, a + cfg.nx + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return TriMesh(pos, np.array(faces, dtype=np.int64), uv)


def _bump(pos, center, radius):
    d2 = np.sum((pos[:, :2] - center) ** 2, axis=1)
    return np.exp(-d2 / (2.0 * radius ** 2))


def _pick_bundle_vertices(cfg: SynthConfig, rng) -> np.ndarray:
    """Jittered lattice of vertices, one per cell, kept off the border."""
    cols = int(np.ceil(np.sqrt(cfg.n_bundles * cfg.width / cfg.height)))
    rows = int(np.ceil(cfg.n_bundles / cols))
    chosen = []
    for r in range(rows):
        for c in range(cols):
            if len(chosen) == cfg.n_bundles:
                break
            fi = (c + 0.5 + rng.uniform(-0.25, 0.25)) / cols
            fj = (r + 0.5 + rng.uniform(-0.25, 0.25)) / rows
            i = int(np.clip(round(fi * (cfg.nx - 1)), 1, cfg.nx - 2))
            j = int(np.clip(round(fj * (cfg.ny - 1)), 1, cfg.ny - 2))
            v = j * cfg.nx + i
            while v in chosen:
                v += 1
            chosen.append(v)
    return np.array(chosen)


def _vertex_attach(mesh: TriMesh, v: int) -> SurfacePoint:
    return mesh.surface_point_at_vertex(v)


class _Generator:
    def __init__(self, cfg: SynthConfig):
        cfg.validate()
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.mesh = make_sheet(cfg)
        self.x0 = self.mesh.positions
        self.half = np.array([cfg.width / 2, cfg.height / 2])

    def jaw_model(self):
        cfg = self.cfg
        return JawModel(hinge_point=np.array([0.0, 0.3 * cfg.height, -0.6 * cfg.width]),
                        hinge_axis=np.array([1.0, 0.0, 0.0]),
                        slide_dir=np.array([0.0, 0.0, 1.0]),
                        lateral_dir=np.array([1.0, 0.0, 0.0]))

    def skin_weights(self):
        y = self.x0[:, 1] / self.cfg.height  # in [-0.5, 0.5]
        t = np.clip((0.1 - y) / 0.25, 0.0, 1.0)  # 1 on the lower part
        return t * t * (3 - 2 * t)

    def base_shape(self):
        """Rest-frame displacement plus its dominant bump (center, radius,
        sign of its vertical motion)."""
        rng, x0 = self.rng, self.x0
        disp = np.zeros_like(x0)
        centers = []
        for _ in range(rng.integers(1, 4)):
            c = rng.uniform(-0.8, 0.8, 2) * self.half
            r = rng.uniform(0.12, 0.3) * self.cfg.width
            direction = rng.normal(size=3)
            direction[2] += 2.0 * np.sign(direction[2] or 1.0)
            direction *= rng.uniform(3.0, 8.0) / np.linalg.norm(direction)
            disp += _bump(x0, c, r)[:, None] * direction
            centers.append((c, r, float(np.sign(direction[2]))))
        # global drift keeps every bundle well away from the neutral
        drift = rng.normal(size=3)
        drift *= rng.uniform(1.0, 2.0) / np.linalg.norm(drift)
        slope = rng.normal(size=(2, 3)) * 0.005
        disp += drift + (x0[:, :2] @ slope)
        return disp, centers[0]

    def bulge(self, center, w):
        """Vertical bulge along the dominant bump, in the bump's direction."""
        c, r, sign = center
        out = np.zeros_like(self.x0)
        out[:, 2] = sign * 4.0 * self.cfg.nonlinearity * w * (1.0 - w) * _bump(self.x0, c, 1.2 * r)
        return out

    def jaw_for(self, jawed):
        if not jawed:
            return JawPose()
        rng = self.rng
        return JawPose(rot=float(rng.uniform(0.05, self.cfg.max_jaw_rot)),
                       protrude=float(rng.uniform(-1.0, 2.0)),
                       lateral=float(rng.uniform(-1.0, 1.0)))


def _skinned_disp(x0, rest_disp, theta, skin, model):
    A, t = blended_transforms(skin, model, theta)
    return np.einsum("vij,vj->vi", A, x0 + rest_disp) + t - x0


class _Clearance:
    """Rejects groups of shapes that move some bundle too little, or too
    close to where another shape moved it."""

    tries = 200

    def __init__(self, verts, min_disp, min_sep):
        self.verts, self.min_disp, self.min_sep = verts, min_disp, min_sep
        self.accepted = []

    def ok(self, group) -> bool:
        seen = list(self.accepted)
        for d in group:
            at = d[self.verts]
            if np.min(np.linalg.norm(at, axis=1)) < self.min_disp:
                return False
            if any(np.min(np.linalg.norm(at - a, axis=1)) < self.min_sep for a in seen):
                return False
            seen.append(at)
        return True

    def draw(self, make):
        """Call ``make`` until the displacements it returns first pass."""
        for _ in range(self.tries):
            out = make()
            if self.ok(out[0]):
                self.accepted.extend(d[self.verts] for d in out[0])
                return out
        raise SynthConfigError("could not generate shapes that move every bundle; "
                               "use fewer bundles or shapes")


def generate(cfg: SynthConfig | None = None) -> SynthResult:
    cfg = cfg or SynthConfig()
    g = _Generator(cfg)
    rng = g.rng
    model, skin = g.jaw_model(), g.skin_weights()
    n_base = cfg.n_shapes - cfg.n_inbetweens
    per = cfg.inbetweens_per_family

    bverts = _pick_bundle_vertices(cfg, rng)
    diag = g.mesh.bbox_diagonal()
    # stay well clear of the default cloud pruning thresholds so that every
    # shape lands in every bundle's cloud
    keep = _Clearance(bverts, 2e-3 * diag, 5e-4 * diag)

    # in-between k belongs to base (k // per) % n_base, at a weight near
    # (k % per + 1) / (per + 1)
    members = {b: [k for k in range(cfg.n_inbetweens) if (k // per) % n_base == b]
               for b in range(n_base)}

    def family(b):
        d, c = g.base_shape()
        ws = [float((k % per + 1) / (per + 1) + rng.uniform(-0.05, 0.05)) for k in members[b]]
        return [d] + [w * d + g.bulge(c, w) for w in ws], c, ws

    rest, centers, thetas = [], [], []
    ib = {}
    jawed = rng.random(n_base) < cfg.jaw_fraction
    for b in range(n_base):
        group, c, ws = keep.draw(lambda: family(b))
        rest.append(group[0])
        centers.append(c)
        thetas.append(g.jaw_for(jawed[b]))
        for k, w, d in zip(members[b], ws, group[1:]):
            ib[k] = (d, w, b)
    names = [f"shape{k:02d}" for k in range(n_base)]
    for k in range(cfg.n_inbetweens):
        d, w, b = ib[k]
        rest.append(d)
        centers.append(centers[b])
        t = thetas[b]
        thetas.append(JawPose(w * t.rot, w * t.protrude, w * t.lateral))
        names.append(f"{names[b]}_ib{k:02d}")

    shapes = []
    for name, d, t in zip(names, rest, thetas):
        disp = _skinned_disp(g.x0, d, t, skin, model)
        shapes.append(Shape(name, disp, t, frozenset({"face"})))

    bundles = []
    for k, v in enumerate(bverts):
        region = "upper" if g.x0[v, 1] > 0 else "lower"
        bundles.append(BundleDef(f"b{k:02d}", _vertex_attach(g.mesh, int(v)),
                                 frozenset({"face", region})))
    lib = ShapeLibrary(g.mesh, shapes, bundles, skin, model)

    track = _track(g, lib, rest, n_base)
    heldout = _heldout(g, lib, rest, centers, n_base)
    return SynthResult(cfg, lib, track, heldout)


def _sequence(lib, frames):
    """frames: list of (rest_disp, theta, weights)."""
    pos, bun, th, ws = [], [], [], []
    for d, theta, w in frames:
        p = skin_positions(lib, lib.x0 + d, theta)
        pos.append(p)
        bun.append(eval_bundles_on_positions(lib, p))
        th.append(theta)
        ws.append(w)
    return Sequence(np.array(pos), bun, th, ws)


def _track(g: _Generator, lib, rest, n_base):
    """Smooth trajectories through random sparse mixtures of library shapes."""
    cfg, rng = g.cfg, g.rng
    S = len(rest)
    n_keys = max(2, cfg.n_frames // 15 + 1)
    keys = np.zeros((n_keys, S + 1))
    for k in range(n_keys):
        idx = rng.choice(S + 1, size=3, replace=False)
        keys[k, idx] = rng.dirichlet(np.ones(3))
    key_rot = rng.uniform(0.0, cfg.max_jaw_rot, n_keys)
    t = np.linspace(0.0, n_keys - 1, cfg.n_frames)
    stack = np.stack(rest)
    frames = []
    for tf in t:
        k = min(int(tf), n_keys - 2)
        a = tf - k
        a = a * a * (3 - 2 * a)
        w = (1 - a) * keys[k] + a * keys[k + 1]
        rot = float((1 - a) * key_rot[k] + a * key_rot[k + 1])
        weights = {NEUTRAL if i == 0 else lib.shapes[i - 1].name: float(w[i])
                   for i in np.flatnonzero(w)}
        frames.append((np.einsum("s,svc->vc", w[1:], stack), JawPose(rot=rot), weights))
    return _sequence(lib, frames)


def _heldout(g: _Generator, lib, rest, centers, n_base):
    """Nonlinear expressions absent from the library.

    One base shape is active on one side of a random line across the sheet
    and a second, at partial strength, on the other side; each carries the
    ``w (1 - w)`` bulge of its local activation.  Only bases whose
    in-between family the library samples are used, and activations never
    sum past one, so every bundle stays close to the sampled data while no
    single set of global weights reproduces the expression.
    """
    cfg, rng, x0 = g.cfg, g.rng, g.x0
    families = min(-(-cfg.n_inbetweens // cfg.inbetweens_per_family), n_base) or n_base
    frames = []
    for _ in range(cfg.n_heldout):
        i, j = rng.choice(families, size=2, replace=families < 2)
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        offset = rng.uniform(-0.3, 0.3) * float(np.abs(direction) @ g.half)
        width = 0.08 * cfg.width
        sigma = 1.0 / (1.0 + np.exp(-(x0[:, :2] @ direction - offset) / width))
        beta = rng.uniform(0.3, 1.0)
        d = np.zeros_like(x0)
        weights = {}
        for base, alpha in ((i, sigma), (j, beta * (1.0 - sigma))):
            d += alpha[:, None] * rest[base]
            d += g.bulge(centers[base], alpha)
            name = lib.shapes[base].name
            weights[name] = weights.get(name, 0.0) + float(alpha.mean())
        rot = float(rng.uniform(0.0, cfg.max_jaw_rot))
        frames.append((d, JawPose(rot=rot), weights))
    return _sequence(lib, frames)


# -- files ----------------------------------------------------------------

def write_sequence(lib: ShapeLibrary, seq: Sequence, directory, prefix="frame"):
    """OBJ per frame plus bundle and jaw CSVs."""
    from .solver import write_jaw_track, write_track

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f, p in enumerate(seq.positions):
        save_obj(lib.neutral, p, directory / f"{prefix}_{f:04d}.obj")
    write_track(seq.bundles, directory / "bundles.csv")
    write_jaw_track(seq.thetas, directory / "jaw.csv")


def write_synth(result: SynthResult, directory) -> dict:
    """Write library, ground-truth track and held-out set; returns the paths."""
    directory = Path(directory)
    manifest = save_library(result.library, directory / "library")
    write_sequence(result.library, result.track, directory / "track")
    write_sequence(result.library, result.heldout, directory / "heldout")
    (directory / "synth.json").write_text(
        json.dumps({"config": asdict(result.config),
                    "track_weights": result.track.weights,
                    "heldout_weights": result.heldout.weights}, indent=2, sort_keys=True) + "\n")
    return {"library": manifest, "track": directory / "track", "heldout": directory / "heldout"}
