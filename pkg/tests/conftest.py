import numpy as np
import pytest
from hypothesis import settings

from modconn.graph import ArchSpec

settings.register_profile("modconn", deadline=None, max_examples=60)
settings.load_profile("modconn")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_resnet():
    return ArchSpec(family="resnet", num_modules=4, fan_in=2, num_classes=3, stage_channels=(4, 8), image_size=8, stem_channels=4)


@pytest.fixture
def tiny_resnext():
    return ArchSpec(
        family="resnext", num_modules=3, fan_in=2, cardinality=3, bottleneck_width=2,
        num_classes=3, stage_channels=(4, 8), image_size=8, stem_channels=4, module_stages=(0, 1, 1),
    )
