"""
Evaluation and analysis statistics over word sequences and attention traces
"""

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from typing_extensions import Literal, get_args

from .corpus import Corpus, split_sentences, strip_separators
from .errors import InvalidArgument

log = logging.getLogger(__name__)


RougeMode = Literal["f1", "limited_recall"]
ROUGE_MODES = get_args(RougeMode)

EVIDENT_THRESHOLD = 0.15
EVIDENT_BINS = 5
MIN_COPIED_SPAN = 5
LEADING_FRACTION = 0.4
NOVEL_NGRAM_ORDERS = (1, 2, 3, 4)


def _lower(words:Sequence[str]) -> List[str]:
    return [w.lower() for w in words]


def ngrams(words:Sequence[str], n:int) -> List[Tuple[str, ...]]:
    return [tuple(words[i:i + n]) for i in range(len(words) - n + 1)]


def _check_mode(mode:RougeMode):
    if mode not in ROUGE_MODES:
        raise InvalidArgument(f"rouge mode must be one of {ROUGE_MODES}, got {mode!r}")


def _combine(overlap:float, cand_total:int, ref_total:int, mode:RougeMode) -> float:
    if mode == "limited_recall":
        return overlap / ref_total if ref_total else 0.0
    precision = overlap / cand_total if cand_total else 0.0
    recall = overlap / ref_total if ref_total else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def rouge_n(candidate:Sequence[str], reference:Sequence[str], n:int, mode:RougeMode="f1") -> float:
    """Clipped n-gram overlap. limited_recall cuts the candidate to the reference length first"""
    if n < 1:
        raise InvalidArgument(f"n must be at least 1, got {n}")
    _check_mode(mode)
    candidate, reference = _lower(candidate), _lower(reference)
    if mode == "limited_recall":
        candidate = candidate[:len(reference)]

    cand, ref = Counter(ngrams(candidate, n)), Counter(ngrams(reference, n))
    overlap = sum((cand & ref).values())
    return _combine(overlap, sum(cand.values()), sum(ref.values()), mode)


def lcs_length(a:Sequence[str], b:Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate:Sequence[str], reference:Sequence[str], mode:RougeMode="f1") -> float:
    _check_mode(mode)
    candidate, reference = _lower(candidate), _lower(reference)
    if mode == "limited_recall":
        candidate = candidate[:len(reference)]
    return _combine(lcs_length(candidate, reference), len(candidate), len(reference), mode)


def novel_ngram_ratio(summary:Sequence[str], document:Sequence[str], n:int, distinct:bool=False) -> float:
    """Share of summary n-grams missing from the document. Counts every occurrence unless distinct is set"""
    if n < 1:
        raise InvalidArgument(f"n must be at least 1, got {n}")
    if len(summary) < n:
        raise InvalidArgument(f"summary of {len(summary)} words has no {n}-grams")

    grams = ngrams(_lower(summary), n)
    if distinct:
        grams = list(dict.fromkeys(grams))
    known = set(ngrams(_lower(document), n))
    return sum(g not in known for g in grams) / len(grams)


def copied_fragments(summary:Sequence[str], document:Sequence[str]) -> List[Tuple[int, int]]:
    """Greedy left-to-right alignment: at each summary position take the longest run found anywhere in
    the document. Returns (start, length) of every matched run in the summary"""
    summary, document = _lower(summary), _lower(document)
    positions:Dict[str, List[int]] = {}
    for j, w in enumerate(document):
        positions.setdefault(w, []).append(j)

    fragments = []
    i = 0
    while i < len(summary):
        best = 0
        for j in positions.get(summary[i], ()):
            k = 0
            while i + k < len(summary) and j + k < len(document) and summary[i + k] == document[j + k]:
                k += 1
            best = max(best, k)
        if best:
            fragments.append((i, best))
            i += best
        else:
            i += 1
    return fragments


def copied_span_fraction(summary:Sequence[str], document:Sequence[str], min_span:int=MIN_COPIED_SPAN) -> float:
    """Fraction of summary tokens inside copied runs at least min_span long"""
    if min_span < 1:
        raise InvalidArgument(f"min_span must be at least 1, got {min_span}")
    if not summary:
        raise InvalidArgument("empty summary")
    copied = sum(length for _, length in copied_fragments(summary, document) if length >= min_span)
    return copied / len(summary)


def leading_window(num_sentences:int, leading_fraction:float) -> int:
    # rounding guards 0.7 * 10 = 7.000000000000001
    return math.ceil(round(leading_fraction * num_sentences, 9))


def match_sentence(sentence:Sequence[str], doc_sentences:Sequence[Sequence[str]]) -> int:
    """Index of the document sentence with the largest R1 + R2 F1, earliest on ties"""
    best, best_score = 0, -1.0
    for i, candidate in enumerate(doc_sentences):
        score = rouge_n(sentence, candidate, 1) + rouge_n(sentence, candidate, 2)
        if score > best_score:
            best, best_score = i, score
    return best


def leading_bias_fraction(summary_sentences:Sequence[Sequence[str]], doc_sentences:Sequence[Sequence[str]],
        leading_fraction:float=LEADING_FRACTION) -> float:
    """Fraction of summary sentences whose best-matching document sentence lies in the leading window"""
    if not doc_sentences:
        raise InvalidArgument("empty document")
    if not 0 < leading_fraction <= 1:
        raise InvalidArgument(f"leading fraction must be in (0, 1], got {leading_fraction}")
    if not summary_sentences:
        raise InvalidArgument("empty summary")

    window = leading_window(len(doc_sentences), leading_fraction)
    hits = sum(match_sentence(s, doc_sentences) < window for s in summary_sentences)
    return hits / len(summary_sentences)


@dataclass
class EvidentHistogram:
    # None when no trace had a single evident weight
    proportions: Optional[List[float]]
    evident_rate: float
    evident_count: int
    total_weights: int
    documents: int
    threshold: float = EVIDENT_THRESHOLD

    @property
    def defined(self) -> bool:
        return self.proportions is not None

    def tail_mass(self, last:int=2) -> float:
        if self.proportions is None:
            raise InvalidArgument("histogram is undefined: no evident attention weights")
        return float(sum(self.proportions[-last:]))


def evident_attention_histogram(traces:Iterable[np.ndarray], threshold:float=EVIDENT_THRESHOLD,
        bins:int=EVIDENT_BINS) -> EvidentHistogram:
    """Source positions j = 1..S of weights above threshold go to bin ceil(j * bins / S).
    Per-document bin proportions are averaged over documents that have evident weights"""
    if not 0 < threshold < 1:
        raise InvalidArgument(f"threshold must be in (0, 1), got {threshold}")
    if bins < 1:
        raise InvalidArgument(f"bins must be at least 1, got {bins}")

    per_doc = []
    evident = total = documents = 0
    for trace in traces:
        trace = np.atleast_2d(np.asarray(trace, dtype=np.float64))
        documents += 1
        total += trace.size
        if trace.size == 0:
            continue
        S = trace.shape[1]
        _, cols = np.nonzero(trace > threshold)
        if cols.size == 0:
            continue
        evident += cols.size
        # integer ceil of (j * bins / S) for 1-based j
        which = ((cols + 1) * bins + S - 1) // S - 1
        counts = np.bincount(which, minlength=bins)
        per_doc.append(counts / counts.sum())

    if documents == 0:
        raise InvalidArgument("no attention traces")

    rate = evident / total if total else 0.0
    if not per_doc:
        log.warning("no attention weight above %g in %i traces, histogram undefined", threshold, documents)
        return EvidentHistogram(None, rate, evident, total, documents, threshold)

    proportions = np.mean(per_doc, axis=0)
    return EvidentHistogram(proportions.tolist(), rate, evident, total, documents, threshold)


def attention_entropy(traces:Iterable[np.ndarray]) -> float:
    """Mean entropy (nats) of the attention rows"""
    entropies = []
    for trace in traces:
        trace = np.atleast_2d(np.asarray(trace, dtype=np.float64))
        if trace.size == 0:
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(trace > 0, trace * np.log(trace), 0.0)
        entropies.extend((-terms.sum(axis=1)).tolist())
    if not entropies:
        raise InvalidArgument("no attention traces")
    return float(np.mean(entropies))


@dataclass
class LengthStats:
    mean: float
    median: float


def summary_length_stats(summaries:Iterable[Sequence[str]]) -> LengthStats:
    lengths = [len(s) for s in summaries]
    if not lengths:
        raise InvalidArgument("no summaries")
    return LengthStats(float(np.mean(lengths)), float(np.median(lengths)))


# --- significance ---

@dataclass
class BootstrapResult:
    mean_diff: float
    low: float
    high: float
    # share of resamples where system A scored higher
    win_rate: float


def bootstrap_interval(scores:Sequence[float], resamples:int=1000, seed:int=0,
        confidence:float=0.95) -> Tuple[float, float, float]:
    """Mean and percentile interval of per-document scores"""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise InvalidArgument("no scores")
    rng = np.random.default_rng(seed)
    means = scores[rng.integers(0, scores.size, size=(resamples, scores.size))].mean(axis=1)
    tail = (1 - confidence) / 2 * 100
    low, high = np.percentile(means, [tail, 100 - tail])
    return float(scores.mean()), float(low), float(high)


def paired_bootstrap(scores_a:Sequence[float], scores_b:Sequence[float], resamples:int=1000, seed:int=0,
        confidence:float=0.95) -> BootstrapResult:
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise InvalidArgument(f"need two equally long, non-empty score lists, got {a.size} and {b.size}")

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, a.size, size=(resamples, a.size))
    diffs = a[idx].mean(axis=1) - b[idx].mean(axis=1)
    tail = (1 - confidence) / 2 * 100
    low, high = np.percentile(diffs, [tail, 100 - tail])
    return BootstrapResult(float(a.mean() - b.mean()), float(low), float(high), float(np.mean(diffs > 0)))


# --- reports ---

@dataclass
class MetricsReport:
    system: str
    rouge_mode: str
    documents: int
    rouge1: float
    rouge2: float
    rougeL: float
    rouge1_interval: Tuple[float, float]
    length_mean: float
    length_median: float
    reference_length_mean: float
    novel_ngrams: Dict[int, float]
    copied_span_fraction: float
    leading_fraction: float
    leading_bias: float
    evident_bins: Optional[List[float]] = None
    evident_rate: Optional[float] = None
    attention_entropy: Optional[float] = None
    # set when the outputs were decoded here rather than loaded from a file
    parameters: Optional[int] = None
    latency_ms: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["novel_ngrams"] = {str(n): v for n, v in self.novel_ngrams.items()}
        d["rouge1_interval"] = list(self.rouge1_interval)
        return d

    def to_json(self, path:Union[str, Path, None]=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_dict(cls, d:Dict[str, Any]) -> "MetricsReport":
        d = dict(d)
        d["novel_ngrams"] = {int(n): v for n, v in d["novel_ngrams"].items()}
        d["rouge1_interval"] = tuple(d["rouge1_interval"])
        return cls(**d)


def build_report(system:str, outputs:Mapping[str, Sequence[str]], corpus:Corpus, rouge_mode:RougeMode="f1",
        leading_fraction:float=LEADING_FRACTION, min_span:int=MIN_COPIED_SPAN,
        traces:Optional[Iterable[np.ndarray]]=None, threshold:float=EVIDENT_THRESHOLD,
        bins:int=EVIDENT_BINS, seed:int=0) -> MetricsReport:
    """Score system outputs (id -> words) against the corpus references. Per-document statistics are averaged"""
    _check_mode(rouge_mode)
    missing = [ex.id for ex in corpus if ex.id not in outputs]
    if missing:
        raise InvalidArgument(f"{len(missing)} documents have no system output, e.g. {missing[0]!r}")
    if len(corpus) == 0:
        raise InvalidArgument("empty corpus")

    r1, r2, rl, copied, leading = [], [], [], [], []
    novel = {n: [] for n in NOVEL_NGRAM_ORDERS}
    ref_lengths = []

    for ex in corpus:
        out = list(outputs[ex.id])
        hyp, ref, doc = strip_separators(out), strip_separators(ex.summary), strip_separators(ex.document)
        r1.append(rouge_n(hyp, ref, 1, rouge_mode))
        r2.append(rouge_n(hyp, ref, 2, rouge_mode))
        rl.append(rouge_l(hyp, ref, rouge_mode))
        ref_lengths.append(len(ref))

        for n in NOVEL_NGRAM_ORDERS:
            if len(hyp) >= n:
                novel[n].append(novel_ngram_ratio(hyp, doc, n))
        if hyp:
            copied.append(copied_span_fraction(hyp, doc, min_span))
            leading.append(leading_bias_fraction(split_sentences(out), split_sentences(ex.document), leading_fraction))

    mean = lambda xs: float(np.mean(xs)) if xs else 0.0
    stats = summary_length_stats(strip_separators(outputs[ex.id]) for ex in corpus)
    _, low, high = bootstrap_interval(r1, seed=seed)

    report = MetricsReport(
        system=system, rouge_mode=rouge_mode, documents=len(corpus),
        rouge1=mean(r1), rouge2=mean(r2), rougeL=mean(rl), rouge1_interval=(low, high),
        length_mean=stats.mean, length_median=stats.median, reference_length_mean=mean(ref_lengths),
        novel_ngrams={n: mean(v) for n, v in novel.items()},
        copied_span_fraction=mean(copied), leading_fraction=leading_fraction, leading_bias=mean(leading))

    if traces is not None:
        traces = list(traces)
        hist = evident_attention_histogram(traces, threshold, bins)
        report.evident_bins = hist.proportions
        report.evident_rate = hist.evident_rate
        report.attention_entropy = attention_entropy(traces)

    log.info("%s: R1 %.4f R2 %.4f RL %.4f, %.1f words", system, report.rouge1, report.rouge2, report.rougeL, report.length_mean)
    return report


def write_histogram_csv(path:Union[str, Path], histograms:Mapping[str, EvidentHistogram]):
    """One row per (label, bin): label, bin, low, high, proportion"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "bin", "low", "high", "proportion", "evident_rate"])
        for label, hist in histograms.items():
            if hist.proportions is None:
                writer.writerow([label, "", "", "", "", hist.evident_rate])
                continue
            bins = len(hist.proportions)
            for k, p in enumerate(hist.proportions):
                writer.writerow([label, k + 1, k / bins, (k + 1) / bins, p, hist.evident_rate])


SWEEP_COLUMNS = ("label", "rouge1", "rouge2", "rougeL", "length_mean", "novel_1", "novel_2", "novel_3", "novel_4",
    "copied_span_fraction", "leading_bias", "evident_tail", "parameters", "latency_ms")


def write_sweep_csv(path:Union[str, Path], reports:Mapping[str, MetricsReport]):
    """One row per setting, for plotting a metric against the temperature coefficient"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_COLUMNS)
        for label, r in reports.items():
            tail = sum(r.evident_bins[-2:]) if r.evident_bins else ""
            writer.writerow([label, r.rouge1, r.rouge2, r.rougeL, r.length_mean,
                *(r.novel_ngrams.get(n, "") for n in NOVEL_NGRAM_ORDERS),
                r.copied_span_fraction, r.leading_bias, tail, r.parameters, r.latency_ms])
