import numpy as np
import pytest
from hypothesis import settings

from wideflow.constitutive import ConstitutiveParams
from wideflow.geometry import build_extension_field, build_rect_channel, parabolic_profile
from wideflow.operators import Space

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def small_channel():
    """8x4 channel on [0,2]x[0,1] with a parabolic inlet (peak 1)."""
    mesh = build_rect_channel(8, 4)
    ext = build_extension_field(mesh, parabolic_profile(1.0, 1.0))
    return mesh, Space(mesh), ext


@pytest.fixture(scope="session")
def default_params():
    return ConstitutiveParams()
