import numpy as np
import pytest

from prefixtune.model import ModelConfig, init_parameters

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=23, max_seq_len=64)
TINY_ENCDEC = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=23, max_seq_len=64, arch="encdec")


def random_model(cfg=TINY, seed=3, scale=0.3):
    """Random weights large enough that every input visibly moves the logits."""
    m = init_parameters(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name, t in m:
        if t.data.ndim == 2:
            t.data = rng.normal(0.0, scale, size=t.shape)
        elif not name.endswith(".g"):
            t.data = rng.normal(0.0, 0.1, size=t.shape)
    m.freeze()
    return m


@pytest.fixture
def tiny_model():
    return random_model()


@pytest.fixture
def encdec_model():
    return random_model(TINY_ENCDEC)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines, printed once at the end of the session
ACCEPTANCE: dict = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
