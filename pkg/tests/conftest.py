import numpy as np
import pytest

from spgat.models import ModelConfig


def tiny_cfg(**kw) -> ModelConfig:
    base = dict(C=8, gen_depths=(1, 1, 1, 1), spe_depths=(1, 1, 1, 1), heads=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_cfg()


def pytest_terminal_summary(terminalreporter):
    import sys
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acc.RESULTS:
            terminalreporter.write_line(line)
