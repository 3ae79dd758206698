import re

_results: dict[int, tuple[str, str]] = {}
_NAME = re.compile(r"test_acceptance\.py::test_c(\d+)_(\w+)")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed or report.skipped:
        if n in _results and _results[n][1] == "FAIL":
            return
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _results[n] = (m.group(2).replace("_", " "), outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        name, outcome = _results[n]
        terminalreporter.write_line(f"criterion {n:2d} {outcome}: {name}")
