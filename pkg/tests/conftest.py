import pytest

from mmgen.model import ModelConfig, init_params
from mmgen.vocab import build_vocab


@pytest.fixture
def small_vocab():
    return build_vocab(16, 8, 4, 8)


@pytest.fixture
def desk_vocab():
    return build_vocab(256, 8, 8, 8)


@pytest.fixture
def tiny_model(desk_vocab):
    cfg = ModelConfig(layers=2, heads=2, model_dim=32, vocab_total=desk_vocab.total, max_seq=256, seed=3)
    return init_params(cfg)


_ACCEPTANCE: dict[int, str] = {}


class _Recorder:
    def __call__(self, number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
