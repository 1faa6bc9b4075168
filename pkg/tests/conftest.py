import numpy as np
import pytest

from tempdistill.corpus import SynthConfig, build_vocab, synth_corpus_generate
from tempdistill.model import ModelConfig, Transformer


class ToyScorer:
    """Prefix-independent model: the next-token distribution depends on the position only.
    The last id is the end token, id 0 doubles as the start token."""
    bos_id = 0
    banned_ids = ()

    def __init__(self, table):
        self.table = np.log(np.asarray(table, dtype=np.float64))
        self.vocab_size = self.table.shape[1]
        self.eos_id = self.vocab_size - 1

    def prepare(self, doc, temps):
        return None

    def next_logits(self, source, prefixes):
        t = min(prefixes.shape[1] - 1, len(self.table) - 1)
        return np.repeat(self.table[t][None], len(prefixes), axis=0), None


@pytest.fixture
def toy_scorer():
    return ToyScorer


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SynthConfig(num_documents=40, min_sentences=4, max_sentences=5, min_words=3, max_words=5,
        vocab_size=30, key_sentences=2, cue_words=2, valid_fraction=0.1, test_fraction=0.1, seed=3)
    return synth_corpus_generate(cfg)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab(small_corpus)


@pytest.fixture
def tiny_config(small_vocab):
    return ModelConfig(vocab_size=len(small_vocab), d_model=8, n_heads=2, encoder_layers=2, decoder_layers=2,
        ffn_dim=16, max_len=64, dropout=0.0)


@pytest.fixture
def tiny_model(tiny_config, small_vocab):
    return Transformer.initialize(tiny_config, seed=7, vocab=small_vocab)
