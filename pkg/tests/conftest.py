import pytest
import torch

from bcqlm.config import load_preset
from bcqlm.data import build_vocab, synth_dataset, template_corpus


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny():
    return load_preset("tiny")


@pytest.fixture(scope="session")
def reference():
    return load_preset("reference-large")


@pytest.fixture(scope="session")
def vocab():
    return build_vocab(template_corpus())


@pytest.fixture(scope="session")
def items(tiny):
    return synth_dataset(tiny.seed, 64, tiny.image_resolution)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
