import pytest

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    key = mark.args[0]
    if rep.failed or rep.when == "call":
        _results[key] = (mark.args[1], rep.outcome, item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_results):
        title, outcome, props = _results[key]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        detail = "; ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"criterion {key} {status}: {title}" + (f" [{detail}]" if detail else ""))
