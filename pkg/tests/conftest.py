from __future__ import annotations

import os
import subprocess
import sys
import threading
import time
import uuid
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


def read_hex_fixture(name: str) -> bytes:
    """Bytes of an annotated hex fixture: '#' starts a comment, whitespace is ignored."""
    text = (FIXTURES / name).read_text()
    return bytes.fromhex("".join(line.split("#", 1)[0].strip() for line in text.splitlines()))


@pytest.fixture(params=["inproc", "tcp"])
def driver(request) -> str:
    return request.param


def fresh_address(driver: str) -> str:
    return "127.0.0.1:0" if driver == "tcp" else f"test-{uuid.uuid4().hex[:10]}"


def run_with_watchdog(fn, seconds: float, *args, **kwargs):
    """Run ``fn`` in a daemon thread; fail the test if it has not returned in time."""
    outcome: dict = {}

    def target():
        try:
            outcome["value"] = fn(*args, **kwargs)
        except BaseException as exc:  # re-raised in the test thread
            outcome["error"] = exc

    t = threading.Thread(target=target, daemon=True)
    t.start()
    t.join(seconds)
    if t.is_alive():
        pytest.fail(f"{getattr(fn, '__name__', fn)} still running after {seconds}s")
    if "error" in outcome:
        raise outcome["error"]
    return outcome.get("value")


def fedsim(*args, **kwargs) -> subprocess.Popen:
    env = {**os.environ, "PYTHONUNBUFFERED": "1"}
    return subprocess.Popen([sys.executable, "-m", "fedsim", *map(str, args)], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True, env=env, **kwargs)


def wait_for_file(path: Path, seconds: float) -> str:
    deadline = time.monotonic() + seconds
    while time.monotonic() < deadline:
        if path.exists() and path.read_text().endswith("\n"):
            return path.read_text().strip()
        time.sleep(0.05)
    raise AssertionError(f"{path} did not appear")


# -- acceptance summary ------------------------------------------------------------
#
# Tests marked ``@pytest.mark.acceptance(n, title)`` are grouped by criterion
# number; the terminal summary prints one PASS or FAIL line per criterion.

_criteria: dict[str, tuple[int, str]] = {}
_outcomes: dict[int, list[str]] = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            _criteria[item.nodeid] = marker.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    number = _criteria[report.nodeid][0]
    if report.failed:
        _outcomes.setdefault(number, []).append("FAIL")
    elif report.when == "call":
        _outcomes.setdefault(number, []).append("SKIP" if report.skipped else "PASS")
    elif report.skipped:
        _outcomes.setdefault(number, []).append("SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    titles: dict[int, str] = {}
    for number, title in _criteria.values():
        titles.setdefault(number, title)
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        results = _outcomes[number]
        verdict = "FAIL" if "FAIL" in results else "PASS" if "PASS" in results else "SKIP"
        terminalreporter.write_line(f"ACCEPTANCE {number}: {verdict}  {titles[number]}")
