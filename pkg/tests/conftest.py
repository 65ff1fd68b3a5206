import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from egogrpo.kinematics import Skeleton  # noqa: E402
from egogrpo.synthdata import build_dataset  # noqa: E402


@pytest.fixture(scope="session")
def skel():
    return Skeleton.default()


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(12, frames=8, seed=3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
