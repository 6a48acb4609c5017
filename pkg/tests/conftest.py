"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""
import re

ACCEPTANCE = {}  # criterion number -> {"ok": bool, "details": [str]}

_NAME = re.compile(r"test_criterion_(\d+)_")


def note(n: int, detail: str) -> None:
    """Attach a human-readable measurement to a criterion line."""
    ACCEPTANCE.setdefault(n, {"ok": True, "details": []})["details"].append(detail)


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    entry = ACCEPTANCE.setdefault(n, {"ok": True, "details": []})
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False
        if report.skipped:
            entry["details"].append("skipped")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        e = ACCEPTANCE[n]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  " + "; ".join(e["details"]))
