"""Shared pytest wiring: echo the acceptance battery verdict lines.

The acceptance module records one (name, ok, detail) triple per criterion in
its ``RESULTS`` list.  Repeating them in a terminal section after the run
gives a single uncaptured pass/fail line per criterion regardless of how
pytest buffers test output.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{verdict}] {name} ({detail})")
