import pytest

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if report.when == "setup" and not report.failed:
        return
    _RESULTS[number] = (report.passed, title, details)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        passed, title, details = _RESULTS[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {title}"
        terminalreporter.write_line(line + (f" ({details})" if details else ""))
