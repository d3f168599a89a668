"""Shared test configuration: collects acceptance-criterion verdicts and
prints one line per criterion in the terminal summary."""

_acceptance_lines: list[str] = []


def record_acceptance(number: int, name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[acceptance {number:02d}] {name}: {status}"
    if detail:
        line += f" ({detail})"
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_acceptance_lines):
        terminalreporter.write_line(line)
