"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

_VERDICTS: list[tuple[str, str, float, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        verdict = "PASS" if report.passed else "FAIL"
        _VERDICTS.append((props["criterion"], verdict, report.duration, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, duration, detail in sorted(_VERDICTS, key=lambda v: int(v[0].split()[0])):
        terminalreporter.write_line(f"{verdict}  criterion {name} ({duration:.1f} s)  {detail}")
