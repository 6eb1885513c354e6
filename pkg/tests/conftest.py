import pytest

# filled by tests/test_acceptance.py: criterion id -> (passed, description, detail)
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, desc, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {desc} -- {detail}")


@pytest.fixture
def record_criterion():
    def record(cid: int, desc: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[cid] = (bool(ok), desc, detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {desc} -- {detail}")
        return ok

    return record
