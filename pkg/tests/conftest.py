import numpy as np
import pytest
import torch

from tevae.model import ModelConfig, TeVAE

TINY = dict(w=8, d_D=2, d_Z=4, h=2, enc_hidden=(8, 4), dec_hidden=(4, 8))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def tiny_model(seed: int = 0, dtype=torch.float64, **overrides) -> TeVAE:
    cfg = ModelConfig(**{**TINY, **overrides})
    return TeVAE(cfg, seed=seed).to(dtype).eval()


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
