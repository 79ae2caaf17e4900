import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_outcomes: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): an acceptance criterion with a PASS/FAIL line")


def pytest_runtest_logreport(report):
    name = dict(report.user_properties).get("criterion")
    if name is None or report.when == "teardown":
        return
    # setup time counts too: desk-scale runs happen in session fixtures
    if report.when == "call" or report.failed:
        _outcomes.setdefault(name, []).append((report.passed, report.duration))
    else:
        _outcomes.setdefault(name, []).append((True, report.duration))


@pytest.fixture(autouse=True)
def _criterion_name(request):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        request.node.user_properties.append(("criterion", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, results in _outcomes.items():
        ok = all(r[0] for r in results)
        secs = sum(r[1] for r in results)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({secs:.1f} s)")
