"""Synthetic library and track generator."""
import dataclasses
from pathlib import Path

import numpy as np
import pytest

from facerecon.index import build_cloud
from facerecon.library import NEUTRAL, eval_bundle, load_library, skin_positions
from facerecon.synth import SynthConfig, SynthConfigError, generate, write_synth

from conftest import SMALL


@pytest.fixture(scope="module")
def default_synth():
    return generate(SynthConfig())


def tree_bytes(root):
    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_fixed_seed_is_byte_identical(tmp_path):
    write_synth(generate(SMALL), tmp_path / "a")
    write_synth(generate(SMALL), tmp_path / "b")
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 10
    assert all(a[k] == b[k] for k in a)


def test_seed_changes_output():
    a = generate(SMALL)
    b = generate(dataclasses.replace(SMALL, seed=SMALL.seed + 1))
    assert not np.allclose(a.library.shapes[0].disp, b.library.shapes[0].disp)


@pytest.mark.parametrize("change", [
    {"n_shapes": 0}, {"n_shapes": 1}, {"n_bundles": 3}, {"nx": 2},
    {"n_inbetweens": 8}, {"inbetweens_per_family": 0}, {"jaw_fraction": 1.5},
    {"max_jaw_rot": 2.0}, {"n_frames": 0}, {"n_bundles": 500},
])
def test_config_violations_rejected(change):
    with pytest.raises(SynthConfigError):
        generate(dataclasses.replace(SMALL, **change))


def test_default_sizes(default_synth):
    lib = default_synth.library
    assert lib.neutral.n_vertices == 2048
    assert len(lib.shapes) == 30 and len(lib.bundles) == 40
    assert sum("_ib" in n for n in lib.shape_names) == 10
    assert default_synth.track.positions.shape == (60, 2048, 3)
    assert len(default_synth.heldout.bundles) == 8


def test_default_library_loads(default_synth, tmp_path):
    paths = write_synth(default_synth, tmp_path)
    lib = load_library(paths["library"])
    diag = lib.bbox_diagonal()
    assert lib.shape_names == default_synth.library.shape_names
    for s in lib.shapes:
        back = skin_positions(lib, lib.x0 + s.disp_unskinned, s.jaw)
        assert np.max(np.linalg.norm(back - (lib.x0 + s.disp), axis=1)) <= 1e-9 * diag


def test_inbetweens_are_not_linear(default_synth):
    lib = default_synth.library
    for s in lib.shapes:
        if "_ib" not in s.name:
            continue
        base = lib.shape(s.name.split("_ib")[0]).disp_unskinned.ravel()
        ib = s.disp_unskinned.ravel()
        c = float(base @ ib / (base @ base))
        assert 0.2 < c < 1.2
        # the w (1 - w) bulge leaves a residual no scaling of the base removes
        assert np.max(np.abs(ib - c * base)) > 0.5


def test_every_shape_reaches_every_cloud():
    lib = generate(SMALL).library
    for b in lib.bundles:
        got = [p.shape for p in build_cloud(lib, b).points]
        assert got == [NEUTRAL] + lib.shape_names


def test_track_is_consistent():
    res = generate(SMALL)
    lib, seq = res.library, res.track
    for f in (0, 5, len(seq.thetas) - 1):
        w = seq.weights[f]
        assert sum(w.values()) == pytest.approx(1.0) and min(w.values()) >= 0
        for b in lib.bundles:
            want = eval_bundle(lib, b, w, seq.thetas[f])
            np.testing.assert_allclose(seq.bundles[f][b.name], want, atol=1e-9)
    steps = np.diff(seq.positions, axis=0)
    assert np.max(np.linalg.norm(steps, axis=2)) < 0.2 * lib.bbox_diagonal()
