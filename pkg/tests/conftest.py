import numpy as np
import pytest

from nativevid import synth
from nativevid.backbone import ModelConfig

# small enough for unit tests, large enough to exercise windows and full layers
TEST_MODEL = ModelConfig(num_layers=2, dim=32, num_heads=4, ffn_dim=64, window=4, init_std=0.1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    return synth.build_corpus(synth.preset("tiny"), root)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance verdicts ------------------------------------------------------------
ACCEPTANCE = {}
N_CRITERIA = 14


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"CRITERION {n:2d}: NOT RUN")
