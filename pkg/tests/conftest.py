import torch


def pytest_configure(config):
    # single-core sandbox determinism; mirrors the CLI's default behavior
    torch.set_num_threads(max(1, torch.get_num_threads()))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = str(getattr(rep, "nodeid", ""))
            if "test_acceptance" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            status = "PASS" if outcome == "passed" else "FAIL"
            if getattr(rep, "when", "call") != "call" and outcome != "passed":
                status = "FAIL"
            # keep the worst status seen for the criterion
            if rows.get(name) != "FAIL":
                rows[name] = status
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name in sorted(rows):
            terminalreporter.write_line(f"{rows[name]}  {name}")
