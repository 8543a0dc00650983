import pytest

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if report.skipped:
            status = "SKIP"
            detail = detail or (report.longrepr[2] if isinstance(report.longrepr, tuple) else "")
        else:
            status = "PASS" if report.passed else "FAIL"
        _OUTCOMES[(number, item.nodeid)] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for (number, _), (status, title, detail) in sorted(_OUTCOMES.items()):
        line = f"criterion {number:>2} {status}: {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)
