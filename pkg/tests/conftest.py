import numpy as np
import pytest

from rgbdface.model import CameraIntrinsics
from rgbdface.synth import gen_rig

# criterion number -> list of (ok, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))


def acceptance_lines() -> list:
    lines = []
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        ok = all(p[0] for p in parts)
        detail = "; ".join(("" if p[0] else "FAILED ") + p[1] for p in parts)
        lines.append(f"ACCEPTANCE {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    return lines


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in lines:
            terminalreporter.write_line(ln)


@pytest.fixture(scope="session")
def rig():
    return gen_rig()


@pytest.fixture(scope="session")
def K():
    return CameraIntrinsics()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
