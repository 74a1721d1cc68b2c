import numpy as np
import pytest

from barriersteer.decoder import ModelConfig, init_model
from barriersteer.numeric import Rng
from barriersteer.task import build_synthetic_task


@pytest.fixture(scope="session")
def tiny():
    """A random 3-layer model with a 4-token image block."""
    cfg = ModelConfig(n_layers=3, n_heads=4, d_model=32, vocab_size=16, max_seq=80, seed=11)
    model = init_model(cfg)
    image = Rng(12).gaussian(4 * 32).reshape(4, 32)
    return model, image


@pytest.fixture(scope="session")
def default_task():
    return build_synthetic_task()


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / scale) if scale > 0 else float(np.max(np.abs(a)))


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Records one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
