import os
import time

import pytest
from hypothesis import settings

from mia_forge.pipeline import RunConfig, run_all

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request, capsys):
    """Record one pass/fail line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One full default ``run-all`` with master seed 0, single-threaded and timed."""
    out = tmp_path_factory.mktemp("run_seed0")
    previous = os.environ.get("MIA_FORGE_THREADS")
    os.environ["MIA_FORGE_THREADS"] = "1"
    try:
        start = time.perf_counter()
        report = run_all(RunConfig(seed=0), out)
        elapsed = time.perf_counter() - start
    finally:
        if previous is None:
            del os.environ["MIA_FORGE_THREADS"]
        else:
            os.environ["MIA_FORGE_THREADS"] = previous
    return out, report, elapsed


@pytest.fixture(scope="session")
def run_report(default_run):
    return default_run[0] / "report.json"
