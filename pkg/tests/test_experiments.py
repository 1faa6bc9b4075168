"""Directional experiments: each trains a teacher on a synthetic corpus, so they only run with -m slow"""

import numpy as np
import pytest

from tempdistill.corpus import SynthConfig, build_vocab, split_sentences, synth_corpus_generate
from tempdistill.decoding import BeamConfig, decode, with_lambda
from tempdistill.distillation import TrainConfig, generate_pseudo_labels, run_distillation, train_model
from tempdistill.metrics import evident_attention_histogram, novel_ngram_ratio
from tempdistill.model import ModelConfig, Transformer

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
LAMBDAS = (1.0, 1.5, 2.0)


def synth(seed):
    return synth_corpus_generate(SynthConfig(num_documents=2200, min_sentences=5, max_sentences=7, min_words=4,
        max_words=7, vocab_size=200, key_sentences=2, cue_words=4, lead_skew=0.8, paraphrase_rate=0.3,
        valid_fraction=50 / 2200, test_fraction=150 / 2200, seed=seed))


def teacher_for(corpus, seed):
    vocab = build_vocab(corpus.split("train"))
    config = ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=4, encoder_layers=2, decoder_layers=2,
        ffn_dim=64, max_len=64, dropout=0.1)
    train = TrainConfig(learning_rate=3e-3, warmup_steps=100, total_steps=1500, batch_tokens=1024, seed=seed,
        valid_every=250)
    return train_model(corpus.split("train"), train, config, vocab, valid=corpus.split("valid")).model


@pytest.fixture(scope="module", params=SEEDS)
def run(request):
    corpus = synth(request.param)
    return request.param, corpus, teacher_for(corpus, request.param)


def pseudo_stats(teacher, corpus, lam, seed):
    pseudo = generate_pseudo_labels(teacher, corpus, BeamConfig(beam_size=4, max_length=40, seed=seed), lam)
    lengths = [len(r.summary) for r in pseudo.records]
    novel = [novel_ngram_ratio(r.summary, r.document, 2) for r in pseudo.records]
    return np.mean(lengths), np.mean(novel)


class TestTemperatureDirections:

    def test_hotter_pseudo_labels_are_shorter_and_more_novel(self, run):
        seed, corpus, teacher = run
        stats = [pseudo_stats(teacher, corpus.split("train"), lam, seed) for lam in LAMBDAS]
        lengths = [s[0] for s in stats]
        novel = [s[1] for s in stats]
        assert lengths[0] > lengths[1] > lengths[2]
        assert novel[0] < novel[1] < novel[2]

    def test_hotter_attention_moves_to_the_tail(self, run):
        seed, corpus, teacher = run
        docs = corpus.split("test")
        tails = []
        for lam in (1.0, 2.0):
            cfg = with_lambda(BeamConfig(beam_size=4, max_length=40, seed=seed), lam)
            traces = [decode(teacher.vocab.encode(ex.document), teacher, cfg).attention for ex in docs]
            tails.append(evident_attention_histogram(traces).tail_mass(2))
        assert tails[1] > tails[0]


def test_students_inherit_the_teacher_style():
    agree = 0
    for seed in SEEDS:
        corpus = synth(seed)
        teacher = teacher_for(corpus, seed)
        student = ModelConfig.from_dict({**teacher.config.to_dict(), "decoder_layers": 1})
        results = run_distillation(teacher, corpus, student, BeamConfig(beam_size=4, max_length=40, seed=seed),
            [1.0, 2.0], TrainConfig(learning_rate=3e-3, warmup_steps=50, total_steps=600, batch_tokens=1024,
            seed=seed, valid_every=200))
        cold, hot = (r.report for r in results)
        agree += hot.length_mean < cold.length_mean and hot.novel_ngrams[2] > cold.novel_ngrams[2]
    assert agree >= 2


def test_synthetic_documents_have_the_configured_shape():
    corpus = synth(0)
    assert len(corpus.split("train")) == 2000
    assert all(5 <= len(split_sentences(ex.document)) <= 7 for ex in corpus)


def test_random_lambda_is_uniform_over_documents():
    corpus = synth_corpus_generate(SynthConfig(num_documents=2000, min_sentences=2, max_sentences=3, min_words=2,
        max_words=3, vocab_size=40, key_sentences=1, cue_words=2, valid_fraction=0.0, test_fraction=0.0, seed=5))
    vocab = build_vocab(corpus)
    model = Transformer.initialize(ModelConfig(vocab_size=len(vocab), d_model=8, n_heads=2, encoder_layers=1,
        decoder_layers=1, ffn_dim=16, max_len=32, dropout=0.0), seed=5, vocab=vocab)
    pseudo = generate_pseudo_labels(model, corpus, BeamConfig(beam_size=1, min_length=2, max_length=3, seed=11),
        (1.0, 2.0))

    lams = np.array([r.lam for r in pseudo.records])
    assert len(lams) == 2000
    assert np.all((lams >= 1.0) & (lams <= 2.0))
    assert lams.mean() == pytest.approx(1.5, abs=0.02)
    assert len(np.unique(lams)) == len(lams)
