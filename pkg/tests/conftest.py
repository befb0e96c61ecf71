import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported as one PASS/FAIL line")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        return
    if report.passed:
        verdict = "PASS"
    elif hasattr(report, "wasxfail"):
        verdict = "FAIL (expected, see ledger)"
    else:
        verdict = "FAIL"
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    line = f"{verdict}  {mark.args[0]}" + (f"  [{detail}]" if detail else "")
    print("\n" + line)
    item.config.stash.setdefault(_LINES, []).append(line)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
