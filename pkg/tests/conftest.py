import numpy as np
import pytest
from hypothesis import settings

from dilo.nets import NetConfig
from dilo.synthdata import make_dataset

settings.register_profile("default", deadline=None)
settings.load_profile("default")


def small_net_config(n_points: int) -> NetConfig:
    return NetConfig(n_points=n_points, d_s=4, d_z=4, front_widths=(16,), adain_widths=(8, 16),
                     point_channels=2, point_widths=(16,), modulator_width=16,
                     enc_point_widths=(8, 16, 16), enc_head_widths=(16,), transform_widths=(8,))


@pytest.fixture(scope="session")
def tiny_data():
    """3 groups x 4 poses, smallest template."""
    return make_dataset(n_groups=3, n_deforms=4, seed=1, V_target=50, n_test_groups=2, n_test_deforms=2)


@pytest.fixture(scope="session")
def tiny_cfg(tiny_data):
    return small_net_config(tiny_data.V)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance verdicts, printed together at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    def record(label: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{label} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
