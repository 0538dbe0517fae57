import numpy as np
import pytest

from mosaicbert.data import build_vocab, synthetic_corpus
from mosaicbert.layers import EncoderConfig


def tiny_config(**changes) -> EncoderConfig:
    base = dict(hidden=16, n_heads=2, n_layers=2, intermediate=24, vocab_size=64, max_seq_len=16,
                ff_dropout=0.0, embed_dropout=0.0, key_block=3)
    base.update(changes)
    return EncoderConfig(**base)


def baseline_tiny(**changes) -> EncoderConfig:
    base = dict(use_alibi=False, use_geglu=False, fused_glu=False, use_unpadding=False, low_precision_ln=False,
                attention_impl="naive", attention_dropout=0.0)
    base.update(changes)
    return tiny_config(**base)


def prefix_mask(lengths, width) -> np.ndarray:
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_corpus():
    docs = synthetic_corpus(50, 0)
    return docs, build_vocab(docs, 512).padded_to(512)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
