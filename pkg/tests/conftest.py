import pytest

# one line per acceptance criterion, printed in the terminal summary
_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    def _report(tag: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {tag}  {detail}".rstrip())
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    # tags look like "AC01", so plain sorting gives criterion order
    for line in sorted(_ACCEPTANCE, key=lambda s: s.split()[1]):
        terminalreporter.write_line(line)
