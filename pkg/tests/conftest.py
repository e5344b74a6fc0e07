import pytest
import torch
from hypothesis import HealthCheck, settings

from fusiondrive.simworld import CameraConfig, build_town

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")
torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def train_town():
    return build_town("train_town")


@pytest.fixture(scope="session")
def test_town():
    return build_town("test_town")


@pytest.fixture(scope="session")
def small_cam():
    return CameraConfig(image_width=160, image_height=120)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
