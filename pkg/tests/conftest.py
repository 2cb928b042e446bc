import pytest

_CRITERIA: dict[str, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    cid, title = mark.args
    entry = _CRITERIA.setdefault(cid, [title, "PASS", ""])
    if report.failed:
        entry[1] = "FAIL"
        msg = str(report.longrepr.reprcrash.message) if hasattr(report.longrepr, "reprcrash") else ""
        entry[2] = msg.splitlines()[0][:120] if msg else ""
    elif report.skipped and entry[1] == "PASS":
        entry[1] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: (c[0], int(c[1:]))):
        title, status, msg = _CRITERIA[cid]
        line = f"{cid:>4} {status}  {title}"
        terminalreporter.write_line(line + (f"  ({msg})" if msg and status != "PASS" else ""))
