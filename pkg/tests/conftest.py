"""Collects one PASS/FAIL/SKIP line per acceptance criterion for the summary."""

_LINES: dict[int, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", (m.args[0], m.args[1], m.kwargs.get("budget"))))


def _status(report) -> str | None:
    xfail = hasattr(report, "wasxfail")
    if report.skipped:
        return "XFAIL (optional)" if xfail else "SKIP"
    if report.when == "call":
        if xfail:
            return "PASS"
        return "PASS" if report.passed else "FAIL"
    return "FAIL" if report.failed else None


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    status = _status(report)
    if status is None:
        return
    number, title, budget = props["criterion"]
    budget_text = f"budget {budget:g} s" if budget else "no budget"
    line = f"[{status}] criterion {number}: {title} ({report.duration:.2f} s, {budget_text})"
    if report.skipped and isinstance(report.longrepr, tuple):
        line += f": {report.longrepr[2]}"
    _LINES[number] = line


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_LINES):
            terminalreporter.write_line(_LINES[number])
