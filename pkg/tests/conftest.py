import os
import sys

import pytest

from feedbacknet.config import TrainConfig

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def tiny_config():
    """A configuration that trains in about a second."""
    return TrainConfig(seed=0, epochs=2, iterations=2, train_per_class=4, test_per_class=4, batch_size=16,
                       image_size=12)


# Outcome of each acceptance criterion, filled in by test_acceptance.py and
# printed as one line per criterion at the end of the run.
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
