import numpy as np
import pytest

from dsmatt import ModelConfig, Transformer
from dsmatt.numcore import Rng
from dsmatt.tasks import SyntheticTask, collate

VARIANTS = ("baseline", "matt", "matt_self", "aan_original")
LAYOUTS = ("post_norm", "pre_norm")


def small_config(**kw) -> ModelConfig:
    base = dict(layers=2, dim=16, ffn_dim=24, heads=2, src_vocab=11, tgt_vocab=11)
    base.update(kw)
    return ModelConfig(**base)


def small_model(seed=0, **kw) -> Transformer:
    return Transformer.create(small_config(**kw), seed)


def small_batch(seed=0, n=3, vocab=11, max_len=5):
    task = SyntheticTask("copy", vocab, 1, max_len)
    return collate(task.sample(Rng(seed), n))


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def batch():
    return small_batch()


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_report():
    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        print(_ACCEPTANCE[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
