"""Facial shape dataset: neutral mesh, displacement shapes, bundles and the
linear-blend-skinned jaw.

Shapes are stored as displacements ``b`` from the neutral positions ``x0``.
At load every shape is also unskinned against its jaw pose,
``b* = T(theta)^-1 (x0 + b) - x0``, so that shape blending happens in a
jaw-neutral frame and the jaw is re-applied afterwards.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import MeshError, SurfacePoint, TriMesh, load_obj, load_obj_positions

logger = logging.getLogger(__name__)

NEUTRAL = "neutral"


class LibraryError(ValueError):
    """Invalid manifest or inconsistent library contents."""


@dataclass(frozen=True)
class JawPose:
    rot: float = 0.0
    protrude: float = 0.0
    lateral: float = 0.0

    def __post_init__(self):
        vals = (self.rot, self.protrude, self.lateral)
        if not all(math.isfinite(v) for v in vals):
            raise LibraryError(f"non-finite jaw pose {vals}")
        if abs(self.rot) >= math.pi / 2:
            raise LibraryError(f"jaw rotation {self.rot} outside (-pi/2, pi/2)")

    def as_dict(self):
        return {"rot": self.rot, "protrude": self.protrude, "lateral": self.lateral}


REST_POSE = JawPose()


@dataclass(frozen=True)
class JawModel:
    """Hinge rotation plus two prismatic directions.

    The hinge axis and the slide direction need not be orthogonal.
    """

    hinge_point: np.ndarray
    hinge_axis: np.ndarray
    slide_dir: np.ndarray
    lateral_dir: np.ndarray

    def __post_init__(self):
        for name in ("hinge_point", "hinge_axis", "slide_dir", "lateral_dir"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise LibraryError(f"jaw model {name} must be a finite 3-vector")
            object.__setattr__(self, name, v)
        for name in ("hinge_axis", "slide_dir", "lateral_dir"):
            if abs(np.linalg.norm(getattr(self, name)) - 1.0) > 1e-9:
                raise LibraryError(f"jaw model {name} is not unit length")

    def as_dict(self):
        return {k: getattr(self, k).tolist()
                for k in ("hinge_point", "hinge_axis", "slide_dir", "lateral_dir")}


@dataclass
class Shape:
    name: str
    disp: np.ndarray
    jaw: JawPose = REST_POSE
    tags: frozenset = frozenset()
    disp_unskinned: np.ndarray | None = None


@dataclass(frozen=True)
class BundleDef:
    name: str
    attach: SurfacePoint
    region_tags: frozenset = frozenset()


@dataclass
class ShapeLibrary:
    neutral: TriMesh
    shapes: list
    bundles: list
    skin_weights: np.ndarray
    jaw_model: JawModel
    _by_name: dict = field(init=False, repr=False)
    _stack: np.ndarray | None = field(init=False, repr=False, default=None)

    def __post_init__(self):
        V = self.neutral.n_vertices
        self.skin_weights = np.asarray(self.skin_weights, dtype=float)
        if self.skin_weights.shape != (V,):
            raise LibraryError(f"expected {V} skin weights, got {self.skin_weights.shape}")
        if np.any(self.skin_weights < 0) or np.any(self.skin_weights > 1):
            raise LibraryError("skin weights must lie in [0, 1]")
        names = [s.name for s in self.shapes]
        if NEUTRAL in names:
            raise LibraryError(f"shape name {NEUTRAL!r} is reserved")
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise LibraryError(f"duplicate shape names: {sorted(dup)}")
        bnames = [b.name for b in self.bundles]
        dup = {n for n in bnames if bnames.count(n) > 1}
        if dup:
            raise LibraryError(f"duplicate bundle names: {sorted(dup)}")
        for b in self.bundles:
            if not 0 <= b.attach.face < self.neutral.n_faces:
                raise LibraryError(f"bundle {b.name}: face {b.attach.face} out of range")
        for s in self.shapes:
            s.disp = np.asarray(s.disp, dtype=float)
            if s.disp.shape != (V, 3):
                raise LibraryError(
                    f"shape {s.name}: topology mismatch ({len(s.disp)} vertices, expected {V})")
            if s.disp_unskinned is None:
                s.disp_unskinned = unskin_shape(self, s)
            check_unskin(self, s)
        self._by_name = {s.name: s for s in self.shapes}
        self._stack = None

    @property
    def x0(self) -> np.ndarray:
        return self.neutral.positions

    @property
    def shape_names(self) -> list:
        return [s.name for s in self.shapes]

    def shape(self, name) -> Shape:
        try:
            return self._by_name[name]
        except KeyError:
            raise LibraryError(f"unknown shape {name!r}") from None

    def bundle(self, name) -> BundleDef:
        for b in self.bundles:
            if b.name == name:
                return b
        raise LibraryError(f"unknown bundle {name!r}")

    def bbox_diagonal(self) -> float:
        return self.neutral.bbox_diagonal()

    def unskinned_stack(self) -> np.ndarray:
        """(S, V, 3) array of unskinned displacements in shape order."""
        if self._stack is None:
            if self.shapes:
                self._stack = np.stack([s.disp_unskinned for s in self.shapes])
            else:
                self._stack = np.zeros((0, self.neutral.n_vertices, 3))
            self._stack.flags.writeable = False
        return self._stack


# -- jaw / skinning -------------------------------------------------------

def _rotation(axis, angle):
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def jaw_transform(model: JawModel, theta: JawPose) -> np.ndarray:
    """4x4 homogeneous rigid transform for a jaw pose.

    Rotation by ``theta.rot`` about the hinge line, followed by translation
    ``protrude * slide_dir + lateral * lateral_dir``.
    """
    R = _rotation(model.hinge_axis, theta.rot)
    p = model.hinge_point
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = p - R @ p + theta.protrude * model.slide_dir + theta.lateral * model.lateral_dir
    return M


def blended_transforms(skin_weights, model: JawModel, theta: JawPose):
    """Per-vertex ``(A, t)`` of the LBS blend ``(1-s) I + s J`` in affine form."""
    J = jaw_transform(model, theta)
    s = np.asarray(skin_weights, dtype=float)[:, None, None]
    A = (1.0 - s) * np.eye(3) + s * J[:3, :3]
    t = s[:, :, 0] * J[:3, 3]
    return A, t


def _check_invertible(A):
    det = np.linalg.det(A)
    bad = np.abs(det) < 1e-6
    if np.any(bad):
        logger.warning("%d skinning blends have determinant < 1e-6", int(bad.sum()))
    return det


def skin_positions(lib: ShapeLibrary, positions, theta: JawPose) -> np.ndarray:
    positions = np.asarray(positions, dtype=float)
    if positions.shape != lib.x0.shape:
        raise LibraryError(
            f"positions have {len(positions)} rows, library has {len(lib.x0)} vertices")
    if theta == REST_POSE:
        return positions.copy()
    A, t = blended_transforms(lib.skin_weights, lib.jaw_model, theta)
    _check_invertible(A)
    return np.einsum("vij,vj->vi", A, positions) + t


def unskin_positions(lib: ShapeLibrary, positions, theta: JawPose) -> np.ndarray:
    positions = np.asarray(positions, dtype=float)
    if theta == REST_POSE:
        return positions.copy()
    A, t = blended_transforms(lib.skin_weights, lib.jaw_model, theta)
    det = _check_invertible(A)
    if np.any(det == 0.0):
        raise LibraryError("degenerate skinning blend: transform not invertible")
    return np.linalg.solve(A, (positions - t)[..., None])[..., 0]


def unskin_shape(lib: ShapeLibrary, shape: Shape) -> np.ndarray:
    return unskin_positions(lib, lib.x0 + shape.disp, shape.jaw) - lib.x0


def check_unskin(lib: ShapeLibrary, shape: Shape, rel_tol: float = 1e-9):
    target = lib.x0 + shape.disp
    back = skin_positions(lib, lib.x0 + shape.disp_unskinned, shape.jaw)
    err = float(np.max(np.linalg.norm(back - target, axis=1))) if len(target) else 0.0
    if err > rel_tol * max(lib.bbox_diagonal(), 1e-300):
        raise LibraryError(f"shape {shape.name}: unskinning identity violated (err {err:.3e})")
    return err


def point_skin_weight(lib: ShapeLibrary, sp: SurfacePoint) -> float:
    return float(np.asarray(sp.bary) @ lib.skin_weights[lib.neutral.faces[sp.face]])


def unskin_point(lib: ShapeLibrary, sp: SurfacePoint, p, theta: JawPose) -> np.ndarray:
    """Invert the skinning blend evaluated at a surface point."""
    p = np.asarray(p, dtype=float)
    if theta == REST_POSE:
        return p.copy()
    A, t = blended_transforms([point_skin_weight(lib, sp)], lib.jaw_model, theta)
    return np.linalg.solve(A[0], p - t[0])


def _face_weights(lib, weights):
    """Dense (S,) vector from a sparse name->weight mapping."""
    for name in weights:
        if name != NEUTRAL and name not in lib._by_name:
            raise LibraryError(f"unknown shape {name!r} in weights")
    return np.array([weights.get(s.name, 0.0) for s in lib.shapes])


def eval_bundle(lib: ShapeLibrary, bundle: BundleDef, weights: dict, theta: JawPose = REST_POSE):
    """Bundle position on ``T(theta)(x0 + sum_n w_n b*_n)``.

    Only the three vertices of the bundle's face are evaluated.  An empty
    weight mapping means the neutral shape.
    """
    w = _face_weights(lib, weights)
    if weights:
        total = sum(weights.values())
        if abs(total - 1.0) > 1e-9 or min(weights.values()) < -1e-9:
            raise LibraryError("bundle weights must be convex")
    vids = lib.neutral.faces[bundle.attach.face]
    local = lib.x0[vids].copy()
    if len(w):
        local += np.einsum("s,svc->vc", w, lib.unskinned_stack()[:, vids])
    if theta != REST_POSE:
        A, t = blended_transforms(lib.skin_weights[vids], lib.jaw_model, theta)
        local = np.einsum("vij,vj->vi", A, local) + t
    return np.asarray(bundle.attach.bary) @ local


def eval_bundles_on_positions(lib: ShapeLibrary, positions) -> dict:
    """Every bundle's surface point on a full set of vertex positions."""
    out = {}
    for b in lib.bundles:
        tri = positions[lib.neutral.faces[b.attach.face]]
        out[b.name] = np.asarray(b.attach.bary) @ tri
    return out


# -- manifest -------------------------------------------------------------

def _parse_tags(text):
    return frozenset(t for t in text.replace(";", " ").split() if t)


def read_bundles(path) -> list:
    bundles = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                sp = SurfacePoint(int(row["face"]),
                                  (float(row["b0"]), float(row["b1"]), float(row["b2"])))
            except (KeyError, ValueError, MeshError) as exc:
                raise LibraryError(f"{path}: bad bundle row {row}: {exc}") from None
            bundles.append(BundleDef(row["name"], sp, _parse_tags(row.get("tags") or "")))
    return bundles


def write_bundles(bundles, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "face", "b0", "b1", "b2", "tags"])
        for b in bundles:
            w.writerow([b.name, b.attach.face, *(repr(float(x)) for x in b.attach.bary),
                        ";".join(sorted(b.region_tags))])


def load_library(manifest_path) -> ShapeLibrary:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise LibraryError(f"{manifest_path}: invalid JSON: {exc}") from None
    root = manifest_path.parent

    def rel(p):
        return root / p

    for key in ("neutral", "jaw_model"):
        if key not in doc:
            raise LibraryError(f"manifest missing {key!r}")
    neutral = load_obj(rel(doc["neutral"]))
    V = neutral.n_vertices
    try:
        jaw_model = JawModel(**{k: doc["jaw_model"][k] for k in
                                ("hinge_point", "hinge_axis", "slide_dir", "lateral_dir")})
    except KeyError as exc:
        raise LibraryError(f"jaw_model missing {exc}") from None

    shapes = []
    for entry in doc.get("shapes", []):
        name = entry.get("name")
        if "jaw" not in entry:
            raise LibraryError(f"shape {name}: missing jaw pose")
        try:
            pos = load_obj_positions(rel(entry["path"]), V)
        except MeshError as exc:
            raise LibraryError(f"shape {name}: topology mismatch: {exc}") from None
        shapes.append(Shape(name=name, disp=pos - neutral.positions,
                            jaw=JawPose(**entry["jaw"]),
                            tags=frozenset(entry.get("tags", []))))

    bundles = read_bundles(rel(doc["bundles"])) if doc.get("bundles") else []
    if doc.get("skin_weights"):
        skin = np.loadtxt(rel(doc["skin_weights"]), dtype=float, ndmin=1)
    else:
        skin = np.zeros(V)
    return ShapeLibrary(neutral, shapes, bundles, skin, jaw_model)


def save_library(lib: ShapeLibrary, directory, manifest_name="library.json") -> Path:
    """Write a library as manifest + OBJ poses + bundle CSV + skin weights."""
    from .mesh import save_obj

    directory = Path(directory)
    (directory / "shapes").mkdir(parents=True, exist_ok=True)
    save_obj(lib.neutral, None, directory / "neutral.obj")
    entries = []
    for s in lib.shapes:
        rel = f"shapes/{s.name}.obj"
        save_obj(lib.neutral, lib.x0 + s.disp, directory / rel)
        entries.append({"name": s.name, "path": rel, "jaw": s.jaw.as_dict(),
                        "tags": sorted(s.tags)})
    write_bundles(lib.bundles, directory / "bundles.csv")
    np.savetxt(directory / "skin_weights.txt", lib.skin_weights, fmt="%.17g")
    manifest = {
        "neutral": "neutral.obj",
        "shapes": entries,
        "bundles": "bundles.csv",
        "jaw_model": lib.jaw_model.as_dict(),
        "skin_weights": "skin_weights.txt",
    }
    path = directory / manifest_name
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
