import pytest

from facerecon.blend import build_blend_context
from facerecon.index import build_index
from facerecon.synth import SynthConfig, generate

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


SMALL = SynthConfig(nx=12, ny=16, width=40.0, height=60.0, n_shapes=8, n_inbetweens=2,
                    n_bundles=8, n_frames=12, n_heldout=3, seed=5)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SMALL)


@pytest.fixture(scope="session")
def small_ctx(small_synth):
    return build_blend_context(small_synth.library, resolution=128)


@pytest.fixture(scope="session")
def small_index(small_synth, small_ctx):
    return build_index(small_synth.library, small_ctx.adjacency)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
