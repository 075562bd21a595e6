import numpy as np
import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_acceptance(k: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[k] = (name, bool(ok), detail)
    print(f"ACCEPTANCE {k} {name}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
