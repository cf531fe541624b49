import pytest

_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict line per acceptance criterion; printed in the terminal summary."""

    def record(cid: str, ok: bool, detail: str) -> bool:
        line = f"{cid} {'PASS' if ok else 'FAIL'} {detail}"
        _ACCEPTANCE[cid] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE, key=lambda c: int(c[1:])):
        terminalreporter.write_line(_ACCEPTANCE[cid])
