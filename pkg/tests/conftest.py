import _acceptance_log


def pytest_terminal_summary(terminalreporter):
    lines = _acceptance_log.LINES
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    with open(_acceptance_log.REPORT_PATH, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    terminalreporter.write_line(f"report written to {_acceptance_log.REPORT_PATH}")
