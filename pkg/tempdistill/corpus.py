"""
Tokenisation, vocabulary, JSONL corpora and the synthetic summarisation corpus
"""

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np

from .errors import InvalidArgument, ParseError

log = logging.getLogger(__name__)


PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
SEP_TOKEN = "</s>" # sentence separator inside documents and summaries

# reserved ids never change
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID = range(5)
RESERVED = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, SEP_TOKEN)

SPLITS = ("train", "valid", "test")


def tokenize(text:str) -> List[str]:
    """Lowercased whitespace words"""
    return text.lower().split()


def detokenize(words:Sequence[str]) -> str:
    return " ".join(words)


def strip_separators(words:Sequence[str]) -> List[str]:
    return [w for w in words if w != SEP_TOKEN]


def split_sentences(words:Sequence[str]) -> List[List[str]]:
    """Split on the separator token; text without any separator falls back to splitting after '.'"""
    delimiter = SEP_TOKEN if SEP_TOKEN in words else "."
    keep_delimiter = delimiter == "."

    sentences, current = [], []
    for w in words:
        if w == delimiter:
            if keep_delimiter:
                current.append(w)
            if current:
                sentences.append(current)
            current = []
        else:
            current.append(w)
    if current:
        sentences.append(current)
    return sentences


class Vocabulary:
    """Token <-> id bijection. Ids 0..4 are pad, unknown, start, end and sentence separator"""

    def __init__(self, tokens:Sequence[str], min_freq:int=1):
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise InvalidArgument(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise InvalidArgument("vocabulary tokens must be unique")
        self.tokens:List[str] = list(tokens)
        self.index:Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        self.min_freq = min_freq


    def __len__(self):
        return len(self.tokens)


    def __contains__(self, token:str):
        return token in self.index


    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens


    def id(self, token:str) -> int:
        return self.index.get(token, UNK_ID)


    def encode(self, words:Iterable[str]) -> List[int]:
        return [self.index.get(w, UNK_ID) for w in words]


    def decode(self, ids:Iterable[int], strip_special:bool=True) -> List[str]:
        special = (PAD_ID, BOS_ID, EOS_ID) if strip_special else ()
        return [self.tokens[i] for i in ids if i not in special]


    def to_dict(self) -> Dict[str, Any]:
        return {"tokens": self.tokens, "min_freq": self.min_freq}


    @classmethod
    def from_dict(cls, d:Dict[str, Any]) -> "Vocabulary":
        return cls(d["tokens"], d.get("min_freq", 1))


    def save(self, path:Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")


    @classmethod
    def load(cls, path:Union[str, Path]) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Example:
    """A document and its summary, gold or generated. Extra JSONL fields travel in meta"""
    id: str
    document: List[str]
    summary: List[str]
    split: str = "train"
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise InvalidArgument("example id can not be empty")
        if not self.document:
            raise InvalidArgument(f"example {self.id!r} has an empty document")
        if not self.summary:
            raise InvalidArgument(f"example {self.id!r} has an empty summary")


class Corpus:
    """Ordered examples with unique ids"""

    def __init__(self, examples:Iterable[Example]=()):
        self.examples:List[Example] = list(examples)
        seen = set()
        for ex in self.examples:
            if ex.id in seen:
                raise InvalidArgument(f"duplicate example id {ex.id!r}")
            seen.add(ex.id)


    def __len__(self):
        return len(self.examples)


    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)


    def __getitem__(self, i:int) -> Example:
        return self.examples[i]


    def __eq__(self, other):
        return isinstance(other, Corpus) and self.examples == other.examples


    def ids(self) -> List[str]:
        return [ex.id for ex in self.examples]


    def split(self, name:str) -> "Corpus":
        return Corpus(ex for ex in self.examples if ex.split == name)


def build_vocab(corpus:Iterable[Example], min_freq:int=1, max_size:Optional[int]=None) -> Vocabulary:
    """Tokens seen at least min_freq times, most frequent first, ties alphabetical"""
    counts = Counter()
    for ex in corpus:
        counts.update(ex.document)
        counts.update(ex.summary)

    for t in RESERVED:
        counts.pop(t, None)

    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max(0, max_size - len(RESERVED))]

    log.debug("vocabulary: %i of %i token types kept (min_freq=%i)", len(kept), len(counts), min_freq)
    return Vocabulary([*RESERVED, *kept], min_freq)


# --- JSONL ---

REQUIRED_FIELDS = ("id", "document", "summary")


def example_to_json(ex:Example) -> Dict[str, Any]:
    return {"id": ex.id, "document": detokenize(ex.document), "summary": detokenize(ex.summary),
        "split": ex.split, **ex.meta}


def load_jsonl(path:Union[str, Path]) -> Corpus:
    """Read one example per line. Blank lines are skipped; an empty file is an empty corpus"""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", path=str(path), line=lineno) from e
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", path=str(path), line=lineno)

            for name in REQUIRED_FIELDS:
                if name not in obj:
                    raise ParseError(f"missing field {name!r}", path=str(path), line=lineno, field=name)
            for name in ("document", "summary"):
                if not isinstance(obj[name], str):
                    raise ParseError(f"field {name!r} must be a string, got {type(obj[name]).__name__}",
                        path=str(path), line=lineno, field=name)

            meta = {k: v for k, v in obj.items() if k not in REQUIRED_FIELDS and k != "split"}
            try:
                examples.append(Example(str(obj["id"]), tokenize(obj["document"]), tokenize(obj["summary"]),
                    obj.get("split", "train"), meta))
            except InvalidArgument as e:
                raise ParseError(str(e), path=str(path), line=lineno) from e

    try:
        return Corpus(examples)
    except InvalidArgument as e:
        raise ParseError(str(e), path=str(path)) from e


def write_jsonl(corpus:Iterable[Example], path:Union[str, Path]):
    with open(path, "w", encoding="utf-8") as f:
        for ex in corpus:
            f.write(json.dumps(example_to_json(ex), ensure_ascii=False))
            f.write("\n")


def load_summaries(path:Union[str, Path]) -> Dict[str, List[str]]:
    """Read system outputs: any JSONL with "id" and "summary" per line"""
    outputs = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", path=str(path), line=lineno) from e
            for name in ("id", "summary"):
                if name not in obj:
                    raise ParseError(f"missing field {name!r}", path=str(path), line=lineno, field=name)
            outputs[str(obj["id"])] = tokenize(obj["summary"])
    return outputs


# --- synthetic corpus ---

@dataclass
class SynthConfig:
    num_documents: int = 2000
    min_sentences: int = 10
    max_sentences: int = 15
    min_words: int = 6
    max_words: int = 12
    vocab_size: int = 600
    key_sentences: int = 3
    lead_skew: float = 0.8
    paraphrase_rate: float = 0.3
    cue_words: int = 8
    valid_fraction: float = 0.05
    test_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("lead_skew", "paraphrase_rate", "valid_fraction", "test_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidArgument(f"{name} must be in [0, 1], got {value}")
        if self.valid_fraction + self.test_fraction > 1.0:
            raise InvalidArgument("valid and test fractions add up to more than the corpus")
        if self.num_documents < 1 or self.vocab_size < 2 or self.cue_words < 1:
            raise InvalidArgument("num_documents, vocab_size and cue_words must be positive")
        if not 1 <= self.min_sentences <= self.max_sentences:
            raise InvalidArgument("sentence count range is empty")
        if not 1 <= self.min_words <= self.max_words:
            raise InvalidArgument("sentence length range is empty")
        if not 1 <= self.key_sentences <= self.min_sentences:
            raise InvalidArgument(f"key_sentences={self.key_sentences} exceeds sentences per document ({self.min_sentences})")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d:Dict[str, Any]) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "tr", "pl")
_NUCLEI = ("a", "e", "i", "o", "u", "ai", "ou")


def _make_words(count:int, rng:np.random.Generator) -> List[str]:
    """Pronounceable distinct pseudo-words"""
    words, seen = [], set(RESERVED)
    while len(words) < count:
        syllables = rng.integers(2, 4)
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))] for _ in range(syllables))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def key_position_weights(num_sentences:int, lead_skew:float) -> np.ndarray:
    """Truncated geometric over sentence positions; lead_skew 0 is uniform, towards 1 front-loaded"""
    q = max(1.0 - lead_skew, 1e-6)
    w = q ** np.arange(num_sentences, dtype=np.float64)
    return w / w.sum()


def synonym_table(words:Sequence[str], rng:np.random.Generator) -> Dict[str, str]:
    """Fixed random pairing: each word's synonym is its partner, an odd word out maps to itself"""
    order = rng.permutation(len(words))
    table = {}
    for i in range(0, len(order) - 1, 2):
        a, b = words[order[i]], words[order[i + 1]]
        table[a], table[b] = b, a
    if len(order) % 2:
        w = words[order[-1]]
        table[w] = w
    return table


def synth_corpus_generate(cfg:SynthConfig) -> Corpus:
    """Documents of random sentences. Key sentences carry a cue word, sit near the front according
    to lead_skew, and the gold summary is those sentences with words swapped for synonyms at paraphrase_rate"""
    rng = np.random.default_rng(cfg.seed)

    lexicon = _make_words(cfg.vocab_size + cfg.cue_words, rng)
    cues, content = lexicon[:cfg.cue_words], lexicon[cfg.cue_words:]
    synonyms = synonym_table(content, rng)

    zipf = 1.0 / np.arange(1, len(content) + 1)
    zipf /= zipf.sum()

    n_valid = int(round(cfg.num_documents * cfg.valid_fraction))
    n_test = int(round(cfg.num_documents * cfg.test_fraction))
    n_train = cfg.num_documents - n_valid - n_test

    examples = []
    for i in range(cfg.num_documents):
        n = int(rng.integers(cfg.min_sentences, cfg.max_sentences + 1))
        keys = set(rng.choice(n, size=cfg.key_sentences, replace=False, p=key_position_weights(n, cfg.lead_skew)).tolist())

        sentences = []
        for s in range(n):
            length = int(rng.integers(cfg.min_words, cfg.max_words + 1))
            words = [content[j] for j in rng.choice(len(content), size=length, p=zipf)]
            if s in keys:
                words.insert(int(rng.integers(0, length + 1)), cues[rng.integers(len(cues))])
            sentences.append(words)

        document = []
        for s, words in enumerate(sentences):
            if s:
                document.append(SEP_TOKEN)
            document.extend(words)

        summary = []
        for s in sorted(keys):
            if summary:
                summary.append(SEP_TOKEN)
            for w in sentences[s]:
                if w in synonyms and rng.random() < cfg.paraphrase_rate:
                    w = synonyms[w]
                summary.append(w)

        split = "train" if i < n_train else ("valid" if i < n_train + n_valid else "test")
        examples.append(Example(f"doc-{i:06d}", document, summary, split))

    log.info("synthesised %i documents (%i train / %i valid / %i test)", cfg.num_documents, n_train, n_valid, n_test)
    return Corpus(examples)
