import re

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    name = props.get("criterion")
    if not name:
        return
    if report.when == "call" or report.failed:
        _CRITERIA[name] = ("PASS" if report.passed else "FAIL", props.get("measured", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda s: int(re.match(r"\d+", s).group())
    for name in sorted(_CRITERIA, key=key):
        status, measured = _CRITERIA[name]
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{measured}]" if measured else ""))
