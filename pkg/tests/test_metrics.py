import csv
import json
from functools import lru_cache

import numpy as np
import pytest
from typing_extensions import get_args

from tempdistill.corpus import Corpus, Example
from tempdistill.errors import InvalidArgument
from tempdistill.metrics import EvidentHistogram, MetricsReport, RougeMode, attention_entropy, bootstrap_interval, \
    build_report, copied_span_fraction, evident_attention_histogram, lcs_length, leading_bias_fraction, leading_window, \
    novel_ngram_ratio, paired_bootstrap, rouge_l, rouge_n, summary_length_stats, write_histogram_csv, write_sweep_csv
from tempdistill.util import sha256_output


def words(text):
    return text.split()


def oracle_rouge_n(cand, ref, n, mode):
    if mode == "limited_recall":
        cand = cand[:len(ref)]
    counts_c, counts_r = {}, {}
    for i in range(len(cand) - n + 1):
        g = " ".join(cand[i:i + n])
        counts_c[g] = counts_c.get(g, 0) + 1
    for i in range(len(ref) - n + 1):
        g = " ".join(ref[i:i + n])
        counts_r[g] = counts_r.get(g, 0) + 1
    overlap = 0
    for g in set(counts_c) & set(counts_r):
        overlap += min(counts_c[g], counts_r[g])
    return oracle_combine(overlap, max(len(cand) - n + 1, 0), max(len(ref) - n + 1, 0), mode)


def oracle_lcs(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def oracle_rouge_l(cand, ref, mode):
    if mode == "limited_recall":
        cand = cand[:len(ref)]
    return oracle_combine(oracle_lcs(cand, ref), len(cand), len(ref), mode)


def oracle_combine(overlap, cand_total, ref_total, mode):
    r = overlap / ref_total if ref_total else 0.0
    if mode == "limited_recall":
        return r
    p = overlap / cand_total if cand_total else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


class TestRouge:

    @pytest.mark.parametrize("mode", ["f1", "limited_recall"])
    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_identical_sequences_score_one(self, mode, n):
        text = words("the cat sat on the mat")
        assert rouge_n(text, text, n, mode) == 1.0
        assert rouge_l(text, text, mode) == 1.0

    def test_hand_counts(self):
        assert rouge_n(words("the cat sat"), words("the cat ran"), 1) == pytest.approx(2 / 3)
        assert rouge_n(words("the cat sat"), words("the cat ran"), 2) == pytest.approx(1 / 2)

    def test_limited_recall_truncates_candidate(self):
        assert rouge_n(words("a b c d"), words("a x"), 1, "limited_recall") == pytest.approx(0.5)

    def test_rouge_l_examples(self):
        assert lcs_length(words("a b c d"), words("a c b d")) == 3
        assert rouge_l(words("a b c d"), words("a c b d")) == pytest.approx(0.75)
        assert rouge_l(words("a b"), words("c d")) == 0.0
        assert rouge_l(words("a b c d e"), words("a b c"), "limited_recall") == 1.0

    def test_case_is_ignored(self):
        assert rouge_n(words("The Cat"), words("the cat"), 2) == 1.0

    def test_empty_inputs_score_zero(self):
        assert rouge_n([], words("a b"), 1) == 0.0
        assert rouge_l(words("a"), [], "f1") == 0.0

    @pytest.mark.parametrize("mode", get_args(RougeMode))
    def test_every_mode_scores_identity_as_one(self, mode):
        assert rouge_n(words("a b"), words("a b"), 2, mode) == rouge_l(words("a b"), words("a b"), mode) == 1.0

    def test_rejects_bad_arguments(self):
        with pytest.raises(InvalidArgument):
            rouge_n(words("a"), words("a"), 0)
        with pytest.raises(InvalidArgument):
            rouge_l(words("a"), words("a"), "precision")

    def test_precision_recall_duality(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a = list(rng.choice(list("abcde"), size=int(rng.integers(1, 12))))
            b = list(rng.choice(list("abcde"), size=int(rng.integers(1, 12))))
            assert rouge_n(a, b, 1) == pytest.approx(rouge_n(b, a, 1), abs=1e-15)
            assert rouge_l(a, b) == pytest.approx(rouge_l(b, a), abs=1e-15)

    @pytest.mark.parametrize("mode", ["f1", "limited_recall"])
    def test_matches_brute_force_oracle(self, mode):
        rng = np.random.default_rng(2024)
        alphabet = [f"w{i}" for i in range(8)]
        for _ in range(1000):
            cand = list(rng.choice(alphabet, size=int(rng.integers(0, 15))))
            ref = list(rng.choice(alphabet, size=int(rng.integers(1, 15))))
            for n in (1, 2):
                assert abs(rouge_n(cand, ref, n, mode) - oracle_rouge_n(cand, ref, n, mode)) <= 1e-12
            assert abs(rouge_l(cand, ref, mode) - oracle_rouge_l(cand, ref, mode)) <= 1e-12


class TestNovelNgrams:

    def test_hand_example(self):
        doc, summary = words("a b c d e"), words("a b f")
        assert novel_ngram_ratio(summary, doc, 1) == pytest.approx(1 / 3)
        assert novel_ngram_ratio(summary, doc, 2) == pytest.approx(1 / 2)

    def test_verbatim_and_disjoint(self):
        doc = words("one two three four five six")
        for n in (1, 2, 3, 4):
            assert novel_ngram_ratio(words("two three four five"), doc, n) == 0.0
            assert novel_ngram_ratio(words("x y z w"), doc, n) == 1.0

    def test_summary_against_itself(self):
        s = words("a b a c b")
        assert all(novel_ngram_ratio(s, s, n) == 0.0 for n in range(1, 6))

    def test_counts_occurrences_unless_distinct(self):
        doc = words("a b")
        assert novel_ngram_ratio(words("z z a"), doc, 1) == pytest.approx(2 / 3)
        assert novel_ngram_ratio(words("z z a"), doc, 1, distinct=True) == pytest.approx(1 / 2)

    def test_too_short_summary(self):
        with pytest.raises(InvalidArgument):
            novel_ngram_ratio(words("a b"), words("a b c"), 3)


class TestCopiedSpans:

    def test_verbatim_substring(self):
        doc = [f"w{i}" for i in range(1, 21)]
        assert copied_span_fraction(doc[4:14], doc) == 1.0

    def test_no_long_match(self):
        doc = [f"w{i}" for i in range(1, 21)]
        assert copied_span_fraction(["w1", "w2", "x", "w5", "w6", "w7", "w8"], doc) == 0.0

    def test_hand_alignment(self):
        doc = [f"w{i}" for i in range(1, 21)]
        summary = doc[2:8] + ["zzz"] + doc[14:16]
        assert copied_span_fraction(summary, doc) == pytest.approx(6 / 9)

    def test_monotone_in_min_span(self):
        rng = np.random.default_rng(0)
        doc = [f"w{i}" for i in rng.integers(0, 6, size=40)]
        for _ in range(50):
            summary = [f"w{i}" for i in rng.integers(0, 7, size=12)]
            values = [copied_span_fraction(summary, doc, k) for k in range(1, 8)]
            assert values == sorted(values, reverse=True)

    def test_rejects_empty_summary_and_bad_span(self):
        with pytest.raises(InvalidArgument):
            copied_span_fraction([], words("a b"))
        with pytest.raises(InvalidArgument):
            copied_span_fraction(words("a"), words("a"), 0)


class TestLeadingBias:

    def doc(self, count):
        return [[f"s{i}", f"t{i}", f"u{i}"] for i in range(count)]

    def test_single_sentence_document(self):
        for f in (0.1, 0.4, 1.0):
            assert leading_bias_fraction([words("x y")], [words("a b c")], f) == 1.0

    def test_hand_example(self):
        doc = self.doc(10)
        assert leading_bias_fraction([doc[0], doc[8]], doc, 0.4) == 0.5

    def test_full_window(self):
        doc = self.doc(10)
        assert leading_bias_fraction([doc[9], doc[5]], doc, 1.0) == 1.0

    def test_ties_go_to_the_earliest_sentence(self):
        doc = [words("a b"), words("c d"), words("a b")]
        assert leading_bias_fraction([words("a b")], doc, 0.34) == 1.0

    def test_window_rounding(self):
        assert leading_window(10, 0.7) == 7
        assert leading_window(10, 0.4) == 4
        assert leading_window(3, 0.4) == 2

    def test_rejects_empty_document(self):
        with pytest.raises(InvalidArgument):
            leading_bias_fraction([words("a")], [], 0.4)


class TestEvidentAttention:

    def test_point_mass_on_last_position(self):
        trace = np.zeros((3, 8))
        trace[:, -1] = 1.0
        hist = evident_attention_histogram([trace])
        assert hist.proportions == [0.0, 0.0, 0.0, 0.0, 1.0]
        assert hist.evident_rate == pytest.approx(3 / 24)

    def test_uniform_weights_are_never_evident(self):
        hist = evident_attention_histogram([np.full((4, 10), 0.1)])
        assert not hist.defined
        assert hist.evident_count == 0
        with pytest.raises(InvalidArgument):
            hist.tail_mass()

    def test_hand_binning(self):
        trace = np.zeros((1, 10))
        trace[0, [0, 1, 8]] = 0.3
        hist = evident_attention_histogram([trace])
        np.testing.assert_allclose(hist.proportions, [2 / 3, 0, 0, 0, 1 / 3])

    def test_proportions_are_averaged_per_document(self):
        first = np.zeros((1, 5))
        first[0, 0] = 0.9
        second = np.zeros((2, 5))
        second[:, 4] = 0.9
        hist = evident_attention_histogram([first, second])
        np.testing.assert_allclose(hist.proportions, [0.5, 0, 0, 0, 0.5])
        assert hist.documents == 2
        assert hist.tail_mass() == pytest.approx(0.5)

    def test_short_sources_fill_bins_unevenly(self):
        trace = np.eye(3)
        hist = evident_attention_histogram([trace], bins=5)
        # positions 1, 2, 3 of 3 land in bins 2, 4, 5
        np.testing.assert_allclose(hist.proportions, [0, 1 / 3, 0, 1 / 3, 1 / 3])
        assert sum(hist.proportions) == pytest.approx(1.0, abs=1e-6)

    def test_rejects_bad_arguments(self):
        with pytest.raises(InvalidArgument):
            evident_attention_histogram([])
        with pytest.raises(InvalidArgument):
            evident_attention_histogram([np.ones((1, 2))], threshold=1.5)

    def test_entropy(self):
        assert attention_entropy([np.full((2, 4), 0.25)]) == pytest.approx(np.log(4))
        assert attention_entropy([np.eye(3)]) == 0.0


class TestLengthAndBootstrap:

    def test_length_stats(self):
        assert summary_length_stats([words("a b c d e f g")]).mean == 7
        stats = summary_length_stats([["w"] * 4, ["w"] * 6])
        assert stats.mean == 5 and stats.median == 5
        with pytest.raises(InvalidArgument):
            summary_length_stats([])

    def test_interval_contains_mean(self):
        scores = np.random.default_rng(0).uniform(size=200)
        mean, low, high = bootstrap_interval(scores, seed=1)
        assert low <= mean <= high
        assert bootstrap_interval(scores, seed=1) == (mean, low, high)

    def test_paired_bootstrap_detects_a_clear_win(self):
        rng = np.random.default_rng(0)
        b = rng.uniform(size=100)
        result = paired_bootstrap(b + 0.1, b)
        assert result.mean_diff == pytest.approx(0.1)
        assert result.low > 0
        assert result.win_rate == 1.0

    def test_paired_bootstrap_needs_matching_lists(self):
        with pytest.raises(InvalidArgument):
            paired_bootstrap([0.1, 0.2], [0.3])


@pytest.fixture
def tiny_corpus():
    return Corpus([
        Example("d1", words("a b c </s> d e f </s> g h i"), words("a b c </s> g h i"), "test"),
        Example("d2", words("p q r s t </s> u v w"), words("p q r"), "test"),
    ])


class TestReport:

    def test_reference_outputs_score_perfectly(self, tiny_corpus):
        outputs = {ex.id: ex.summary for ex in tiny_corpus}
        report = build_report("gold", outputs, tiny_corpus)
        assert report.rouge1 == report.rouge2 == report.rougeL == 1.0
        assert report.novel_ngrams[1] == 0.0
        assert report.length_mean == pytest.approx(4.5)
        assert report.reference_length_mean == pytest.approx(4.5)
        assert report.leading_bias == pytest.approx(0.75)
        assert report.copied_span_fraction == 0.0
        assert report.evident_bins is None

    def test_missing_output_is_an_error(self, tiny_corpus):
        with pytest.raises(InvalidArgument):
            build_report("sys", {"d1": words("a")}, tiny_corpus)

    def test_traces_fill_the_attention_fields(self, tiny_corpus):
        outputs = {ex.id: ex.summary for ex in tiny_corpus}
        trace = np.zeros((2, 5))
        trace[:, 0] = 1.0
        report = build_report("sys", outputs, tiny_corpus, traces=[trace, trace])
        assert report.evident_bins == [1.0, 0.0, 0.0, 0.0, 0.0]
        assert report.attention_entropy == 0.0

    def test_json_round_trip(self, tiny_corpus, tmp_path):
        report = build_report("sys", {"d1": words("a b x"), "d2": words("p z")}, tiny_corpus, "limited_recall")
        report.to_json(tmp_path / "r.json")
        again = MetricsReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
        assert again == report

    def test_csv_outputs(self, tiny_corpus, tmp_path):
        hist = EvidentHistogram([0.5, 0.5], 0.2, 2, 10, 1)
        write_histogram_csv(tmp_path / "h.csv", {"lam=1.0": hist, "empty": EvidentHistogram(None, 0.0, 0, 4, 1)})
        rows = list(csv.reader((tmp_path / "h.csv").read_text().splitlines()))
        assert rows[0][0] == "label"
        assert [r[1] for r in rows[1:3]] == ["1", "2"]
        assert rows[3][1] == ""

        report = build_report("sys", {ex.id: ex.summary for ex in tiny_corpus}, tiny_corpus)
        write_sweep_csv(tmp_path / "s.csv", {"lam=1.0": report})
        rows = list(csv.DictReader((tmp_path / "s.csv").read_text().splitlines()))
        assert rows[0]["label"] == "lam=1.0"
        assert float(rows[0]["rouge1"]) == 1.0
        assert rows[0]["parameters"] == rows[0]["latency_ms"] == ""

        report.parameters, report.latency_ms = 1234, 2.5
        write_sweep_csv(tmp_path / "s.csv", {"lam=1.0": report})
        row = next(csv.DictReader((tmp_path / "s.csv").read_text().splitlines()))
        assert (int(row["parameters"]), float(row["latency_ms"])) == (1234, 2.5)

    def test_timing_stays_out_of_output_digests(self, tiny_corpus, tmp_path):
        report = build_report("sys", {ex.id: ex.summary for ex in tiny_corpus}, tiny_corpus)
        digests = []
        for latency in (1.0, 7.5):
            report.latency_ms = latency
            report.to_json(tmp_path / "r.json")
            write_sweep_csv(tmp_path / "s.csv", {"lam=1.0": report})
            digests.append((sha256_output(tmp_path / "r.json"), sha256_output(tmp_path / "s.csv")))
        assert digests[0] == digests[1]

        report.rouge1 = 0.5
        report.to_json(tmp_path / "r.json")
        write_sweep_csv(tmp_path / "s.csv", {"lam=1.0": report})
        assert sha256_output(tmp_path / "r.json") != digests[0][0]
        assert sha256_output(tmp_path / "s.csv") != digests[0][1]
