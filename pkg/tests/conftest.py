import numpy as np
import pytest
import torch

from textcue.corpus import CorpusConfig, generate_corpus

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)


def tiny_corpus_config(**kw) -> CorpusConfig:
    base = dict(examples={"train": 8, "valid": 4, "test": 4}, speakers={"train": 4, "valid": 2, "test": 2})
    base.update(kw)
    return CorpusConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_corpus(tiny_corpus_config(), 0, root)
    return root
