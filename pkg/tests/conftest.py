import numpy as np
import pytest

from hiersum.data import BatchConfig, build_vocab, gen_synthetic, make_batch
from hiersum.model import ModelConfig


@pytest.fixture(scope="session")
def corpus():
    return list(gen_synthetic(11, 64))


@pytest.fixture(scope="session")
def vocab(corpus):
    return build_vocab(corpus)


def tiny_config(vocab_size, **overrides):
    kw = dict(d_model=16, n_heads=2, d_ff=32, n_enc_layers=2, n_dec_layers=2,
              vocab_size=vocab_size, max_positions=32, src_trunc=64, tgt_trunc=16)
    kw.update(overrides)
    return ModelConfig(**kw)


def batch_for(examples, vocab, cfg):
    return make_batch(examples, vocab, BatchConfig(cfg.use_sod, cfg.pos_restart, cfg.src_trunc, cfg.tgt_trunc))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
