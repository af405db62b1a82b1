import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile(
    "default",
    max_examples=30,
    deadline=None,
    derandomize=True,
    suppress_health_check=[hypothesis.HealthCheck.function_scoped_fixture],
)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    Usage: ``criterion(n, description)`` at the top of the test; the outcome is
    filled in from the test report.
    """
    entry = {}

    def register(number, text):
        entry.update(number=number, text=text)

    yield register
    if entry:
        entry["nodeid"] = request.node.nodeid
        ACCEPTANCE_LINES.append(entry)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.acceptance_passed = report.passed


def pytest_runtest_teardown(item):
    item.config._acceptance_items = getattr(item.config, "_acceptance_items", {})
    item.config._acceptance_items[item.nodeid] = getattr(item, "acceptance_passed", False)


def pytest_terminal_summary(terminalreporter, config):
    if not ACCEPTANCE_LINES:
        return
    results = getattr(config, "_acceptance_items", {})
    terminalreporter.section("acceptance criteria")
    for e in sorted(ACCEPTANCE_LINES, key=lambda e: (e["number"], e["nodeid"])):
        status = "PASS" if results.get(e["nodeid"]) else "FAIL"
        terminalreporter.write_line(f"criterion {e['number']}: {status}  {e['text']}")
