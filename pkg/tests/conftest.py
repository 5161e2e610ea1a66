import numpy as np
import pytest

from trajmap.decoder import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    # 16x16 frames, 4x4 patches -> N=16 tokens; cheap enough for per-test forwards
    return ModelConfig(height=16, width=16, patch=4, dim=32, heads=2, depth=2, head_hidden=32)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
