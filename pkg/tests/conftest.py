import pytest

_OUTCOMES = {}
_NOTES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")


@pytest.fixture()
def note(request):
    """Attach a measured value to the criterion line in the summary."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        _NOTES.setdefault(marker.args[0], []).append(str(text))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    n, title = marker.args
    prev = _OUTCOMES.get(n, (title, True))
    _OUTCOMES[n] = (title, prev[1] and not report.failed)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        title, ok = _OUTCOMES[n]
        notes = "; ".join(_NOTES.get(n, []))
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))
