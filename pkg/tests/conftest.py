import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_INI = """\
[corpus]
train_count = 12
eval_count = 4
min_frames = 24
max_frames = 36

[vq]
d_latent = 8
codebook_size = 16
levels = 3
hidden = 16
blocks = 1
dropout = 0.0

[rqhc]
d_model = 32
heads = 2, 2, 1
layers = 1, 1, 1
max_relative = 32
dropout = 0.0

[train.vq]
steps = 40
batch = 8
window = 24
log_every = 10
eval_every = 0

[train.rqhc]
steps = 40
batch = 8
window = 40
log_every = 10
eval_every = 0

[sampler]
max_len = 30
"""


@pytest.fixture
def tiny_config():
    from rqmotion.config import parse_config

    return parse_config(TINY_INI)


@pytest.fixture
def tiny_dataset(tiny_config):
    from rqmotion.data import synthesize_corpus

    return synthesize_corpus(tiny_config.corpus, 0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
