import pytest

_LINES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for the acceptance criterion this test covers, then assert."""
    number = request.node.get_closest_marker("criterion").args[0]

    def record(ok, detail):
        _LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number = mark.args[0]
    if rep.failed and number not in _LINES:
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        _LINES[number] = f"criterion {number:>2}: FAIL  {msg}"


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_LINES):
        terminalreporter.write_line(_LINES[k])
