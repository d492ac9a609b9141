from __future__ import annotations

import numpy as np
import pytest

from viewmatch.geometry import Camera
from viewmatch.mesh import make_cuboid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    """16x16 feature grid over a 128px frame."""
    return Camera(scale=45.0, principal=(64.0, 64.0), image_size=(128, 128),
                  feature_stride=8)


@pytest.fixture
def unit_cube():
    return make_cuboid((1.0, 1.0, 1.0), 1)


@pytest.fixture
def box_mesh():
    return make_cuboid((1.0, 0.65, 0.45), 2)


_acceptance_outcomes: dict[str, dict] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    entry = _acceptance_outcomes.setdefault(
        report.nodeid, {"failed": False, "skipped": False, "duration": 0.0})
    if report.failed:
        entry["failed"] = True
    if report.skipped:
        entry["skipped"] = True
    # Fixture time counts: the benchmark criteria do their work in shared
    # session fixtures, which pytest bills to the first requester's setup.
    entry["duration"] += report.duration


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_outcomes:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria", sep="-")
    for nodeid, entry in _acceptance_outcomes.items():
        name = nodeid.split("::")[-1].removeprefix("test_")
        number, _, rest = name.partition("_")
        label = f"criterion {number}: {rest.replace('_', ' ')}"
        if entry["failed"]:
            verdict = "FAIL"
        elif entry["skipped"]:
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(
            f"{label:<58s} {verdict}  ({entry['duration']:.1f}s)")
