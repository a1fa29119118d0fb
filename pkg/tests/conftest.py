"""Prints one PASS/FAIL line per acceptance checklist item after the run."""

import re

_CRIT = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRIT.search(rep.nodeid)
            if m:
                label = "PASS" if outcome == "passed" else "FAIL"
                rows[int(m.group(1))] = (m.group(2).replace("_", " "), label)
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance checklist")
    for num in sorted(rows):
        name, label = rows[num]
        terminalreporter.write_line(f"criterion {num:02d} ({name}): {label}")
