import pytest


@pytest.fixture(scope="session")
def verdict(pytestconfig):
    """Record one PASS/FAIL line per acceptance criterion.

    Lines are echoed inline and repeated in the terminal summary.
    """
    lines = pytestconfig.__dict__.setdefault("_acceptance_lines", [])
    reporter = pytestconfig.pluginmanager.get_plugin("terminalreporter")

    def record(criterion: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f" -- {detail}" if detail else "")
        lines.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(f"[acceptance] {line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
