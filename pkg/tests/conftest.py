import json
import os
from pathlib import Path

import numpy as np
import pytest

# Criterion results collected by tests/test_acceptance.py for the summary hook.
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}: {detail}")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def accept_cache(tmp_path_factory) -> Path:
    """Artifact cache for the heavy acceptance runs.

    Point SFM_LAB_ACCEPT_CACHE at a persistent directory to reuse simulated
    datasets and completed training runs across pytest invocations; by
    default everything is regenerated under the pytest tmp tree.
    """
    env = os.environ.get("SFM_LAB_ACCEPT_CACHE")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("acceptance")
