"""
Teacher training, pseudo-label generation, student initialisation and the experiment grids
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from time import perf_counter
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .async_loop import run_jobs
from .autodiff import Adam, Tape, Tensor, reverse_gradient
from .corpus import BOS_ID, EOS_ID, Corpus, Example, Vocabulary, load_jsonl, write_jsonl
from .decoding import BeamConfig, DecodeResult, decode, with_lambda, write_attention_dump
from .errors import DistillationError, InvalidArgument, InvalidState, LabError
from .metrics import MetricsReport, RougeMode, build_report, rouge_l, rouge_n
from .model import AttentionTemperatures, ModelConfig, Parameters, Transformer, parameter_shapes
from .util import document_rng, safe_filename, sha256_file, sha256_output, unique_name

log = logging.getLogger(__name__)


SCHEDULES = ("linear_warmup_constant", "inverse_sqrt", "linear_warmup_decay")
SELECTIONS = ("first_k", "maximally_spaced")

# share of documents allowed to fail before pseudo-labelling gives up
MAX_FAILURE_RATE = 0.01

# share of corpus words the model vocabulary may miss before the corpus counts as foreign
MAX_UNKNOWN_RATE = 0.5

# digest chain of a distillation run, next to its artifacts
PROVENANCE_FILE = "provenance.json"


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_tokens: int = 2048
    label_smoothing: float = 0.1
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    schedule: str = "linear_warmup_constant"
    valid_every: int = 200
    log_every: int = 50
    select_by: str = "loss"
    # greedy decoding length cap when checkpoints are selected by validation ROUGE
    rouge_max_length: int = 64

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.learning_rate < 0:
            raise InvalidArgument(f"learning rate can not be negative, got {self.learning_rate}")
        if self.total_steps < 1:
            raise InvalidArgument(f"total_steps must be at least 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise InvalidArgument(f"need 0 <= warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}")
        if not 0 <= self.label_smoothing < 1:
            raise InvalidArgument(f"label smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.batch_tokens < 1:
            raise InvalidArgument(f"batch_tokens must be positive, got {self.batch_tokens}")
        if self.schedule not in SCHEDULES:
            raise InvalidArgument(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.select_by not in ("loss", "rouge"):
            raise InvalidArgument(f"select_by must be 'loss' or 'rouge', got {self.select_by!r}")
        if self.valid_every < 1 or self.log_every < 1:
            raise InvalidArgument("valid_every and log_every must be positive")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d:Dict[str, Any]) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(step:int, cfg:TrainConfig) -> float:
    """Scheduled rate for a 1-based step"""
    base, warmup = cfg.learning_rate, cfg.warmup_steps
    if cfg.schedule == "inverse_sqrt":
        if warmup == 0:
            return base / math.sqrt(step)
        return base * min(step / warmup, math.sqrt(warmup / step))

    if warmup and step < warmup:
        return base * step / warmup
    if cfg.schedule == "linear_warmup_decay":
        remaining = cfg.total_steps - warmup
        return base * max(0.0, (cfg.total_steps - step) / remaining) if remaining else base
    return base


# --- training ---

Pair = Tuple[List[int], List[int]]


def encode_example(vocab:Vocabulary, ex:Example) -> Pair:
    """Document ids, and summary ids wrapped in start/end tokens"""
    return vocab.encode(ex.document), [BOS_ID, *vocab.encode(ex.summary), EOS_ID]


def unknown_rate(vocab:Vocabulary, corpus:Corpus) -> float:
    """Share of document and summary words the vocabulary does not know"""
    words = [w for ex in corpus for w in (*ex.document, *ex.summary)]
    if not words:
        return 0.0
    return sum(w not in vocab for w in words) / len(words)


def make_batches(pairs:Sequence[Pair], batch_tokens:int, rng:np.random.Generator) -> Iterator[List[int]]:
    """Endless stream of index batches over reshuffled passes. A batch holds at least one pair"""
    sizes = [len(d) + len(s) for d, s in pairs]
    while True:
        batch, tokens = [], 0
        for i in rng.permutation(len(pairs)).tolist():
            if batch and tokens + sizes[i] > batch_tokens:
                yield batch
                batch, tokens = [], 0
            batch.append(i)
            tokens += sizes[i]
        if batch:
            yield batch


@dataclass
class TrainResult:
    model: Transformer
    train_losses: List[float]
    # (step, value): loss, or ROUGE when selecting by ROUGE
    valid_curve: List[Tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_value: Optional[float] = None


def validation_loss(model:Transformer, pairs:Sequence[Pair], batch_tokens:int) -> float:
    """Token-weighted NLL without label smoothing or dropout"""
    batches, batch, size = [], [], 0
    for d, s in pairs:
        if batch and size + len(d) + len(s) > batch_tokens:
            batches.append(batch)
            batch, size = [], 0
        batch.append((d, s))
        size += len(d) + len(s)
    if batch:
        batches.append(batch)

    total = count = 0.0
    for batch in batches:
        tokens = sum(len(s) - 1 for _, s in batch)
        loss = model.batch_loss([d for d, _ in batch], [s for _, s in batch], 0.0)
        total += loss.item() * tokens
        count += tokens
    return total / count


def validation_rouge(model:Transformer, valid:Corpus, max_length:int) -> float:
    """Mean of R1, R2 and RL F1 of greedy outputs"""
    cfg = BeamConfig(beam_size=1, max_length=max_length)
    scores = []
    for ex in valid:
        result = decode(model.vocab.encode(ex.document), model, cfg)
        hyp = model.vocab.decode(result.tokens)
        scores.append((rouge_n(hyp, ex.summary, 1) + rouge_n(hyp, ex.summary, 2) + rouge_l(hyp, ex.summary)) / 3)
    return float(np.mean(scores))


def train_model(corpus:Corpus, config:TrainConfig, model_config:Optional[ModelConfig]=None,
        vocab:Optional[Vocabulary]=None, init:Union[None, Transformer, Parameters]=None,
        valid:Optional[Corpus]=None) -> TrainResult:
    """Minimise label-smoothed NLL of the corpus summaries with Adam.
    Returns the checkpoint that scored best on valid (the last one when there is no valid set)."""
    if len(corpus) == 0:
        raise InvalidArgument("empty training corpus")

    if isinstance(init, Transformer):
        if vocab is not None and init.vocab is not None and vocab != init.vocab:
            raise InvalidArgument("corpus vocabulary does not match the model's")
        if model_config is not None and model_config != init.config:
            raise InvalidArgument("model config does not match the initial model")
        model = Transformer(init.config, init.params.clone(), init.vocab or vocab)
    else:
        if model_config is None:
            raise InvalidArgument("need a model config to train from parameters or from scratch")
        params = init.clone() if isinstance(init, Parameters) else Parameters.initialize(model_config, config.seed)
        model = Transformer(model_config, params, vocab)

    if model.vocab is None:
        raise InvalidArgument("training needs a vocabulary")
    vocab = model.vocab

    rate = unknown_rate(vocab, corpus)
    if rate > MAX_UNKNOWN_RATE:
        raise InvalidArgument(f"corpus vocabulary does not match the model's: {rate:.0%} of its words are unknown")
    if rate > 0:
        log.debug("%.2f%% of the corpus words are unknown to the vocabulary", 100 * rate)

    pairs = [encode_example(vocab, ex) for ex in corpus]
    valid_pairs = [encode_example(vocab, ex) for ex in valid] if valid is not None and len(valid) else []

    batch_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    log.info("training %i parameters on %i pairs for %i steps", model.params.num_elements(), len(pairs), config.total_steps)
    batches = make_batches(pairs, config.batch_tokens, batch_rng)
    optimizer = Adam(model.params.items(), lr=config.learning_rate, betas=config.betas, eps=config.adam_eps,
        weight_decay=config.weight_decay, clip_norm=config.clip_norm)

    result = TrainResult(model, [])
    best_params = None

    def validate(step:int):
        nonlocal best_params
        if config.select_by == "rouge":
            value = validation_rouge(model, valid, config.rouge_max_length)
            better = result.best_value is None or value > result.best_value
        else:
            value = validation_loss(model, valid_pairs, config.batch_tokens)
            better = result.best_value is None or value < result.best_value
        result.valid_curve.append((step, value))
        log.info("step %i: validation %s %.4f", step, config.select_by, value)
        if better:
            result.best_step, result.best_value = step, value
            best_params = model.params.clone()

    for step in range(1, config.total_steps + 1):
        batch = next(batches)
        with Tape() as tape:
            loss = model.batch_loss([pairs[i][0] for i in batch], [pairs[i][1] for i in batch],
                config.label_smoothing, dropout_rng)
        reverse_gradient(loss, tape)
        lr = learning_rate(step, config)
        norm = optimizer.step(lr)
        optimizer.zero_grad()

        result.train_losses.append(loss.item())
        if step % config.log_every == 0 or step == 1:
            log.info("step %i: loss %.4f lr %.2e grad norm %.3f", step, loss.item(), lr, norm)

        if valid_pairs and (step % config.valid_every == 0 or step == config.total_steps):
            validate(step)

    if best_params is not None:
        model.params = best_params
    else:
        result.best_step = config.total_steps
    return result


# --- pseudo labels ---

@dataclass
class PseudoLabelRecord:
    doc_id: str
    document: List[str]
    summary: List[str]
    # a single float when every family used the same coefficient, else per family
    lam: Union[float, Dict[str, float]]
    decoder_digest: str
    teacher_digest: str
    split: str = "train"

    def to_example(self) -> Example:
        return Example(self.doc_id, self.document, self.summary, self.split, {
            "lambda": self.lam, "decoder_digest": self.decoder_digest, "teacher_digest": self.teacher_digest})

    @classmethod
    def from_example(cls, ex:Example) -> "PseudoLabelRecord":
        for key in ("lambda", "teacher_digest"):
            if key not in ex.meta:
                raise InvalidArgument(f"example {ex.id!r} is not a pseudo label: no {key!r}")
        return cls(ex.id, ex.document, ex.summary, ex.meta["lambda"], ex.meta.get("decoder_digest", ""),
            ex.meta["teacher_digest"], ex.split)

    @property
    def temperatures(self) -> AttentionTemperatures:
        if isinstance(self.lam, dict):
            return AttentionTemperatures.from_dict(self.lam)
        return AttentionTemperatures.uniform(self.lam)


@dataclass
class PseudoCorpus:
    records: List[PseudoLabelRecord]
    teacher_digest: str
    decoder_digest: str
    # (doc_id, message) of documents that failed to decode
    failures: List[Tuple[str, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_corpus(self) -> Corpus:
        return Corpus(r.to_example() for r in self.records)

    def write(self, path:Union[str, Path]) -> str:
        write_jsonl(self.to_corpus(), path)
        return sha256_file(path)

    @classmethod
    def load(cls, path:Union[str, Path]) -> "PseudoCorpus":
        records = [PseudoLabelRecord.from_example(ex) for ex in load_jsonl(path)]
        teacher = records[0].teacher_digest if records else ""
        decoder = records[0].decoder_digest if records else ""
        return cls(records, teacher, decoder)


LambdaSetting = Union[None, float, Tuple[float, float], AttentionTemperatures]


def _pseudo_label(teacher:Transformer, ex:Example, cfg:BeamConfig, decoder_digest:str, teacher_digest:str,
        dump_attention:Optional[Path]) -> PseudoLabelRecord:
    result = decode(teacher.vocab.encode(ex.document), teacher, cfg, document_rng(cfg.seed, ex.id))
    summary = teacher.vocab.decode(result.tokens)
    if not summary:
        raise InvalidState("decoded an empty summary")
    if dump_attention is not None:
        write_attention_dump(result, ex.id, dump_attention, teacher.vocab.decode(result.tokens, strip_special=False))

    lam = result.lam if result.lam is not None else result.temperatures.to_dict()
    return PseudoLabelRecord(ex.id, ex.document, summary, lam, decoder_digest, teacher_digest, ex.split)


def generate_pseudo_labels(teacher:Transformer, corpus:Corpus, decode_cfg:BeamConfig, lambda_mode:LambdaSetting=None,
        workers:int=1, dump_attention:Union[str, Path, None]=None) -> PseudoCorpus:
    """Decode every document with the teacher. Each document draws from its own generator seeded by
    (seed, doc id), so the output does not depend on the number of workers"""
    if teacher.vocab is None:
        raise InvalidArgument("teacher model has no vocabulary")
    if len(corpus) == 0:
        raise InvalidArgument("empty corpus")

    cfg = with_lambda(decode_cfg, lambda_mode)
    decoder_digest = cfg.digest()
    teacher_digest = teacher.digest()
    dump = Path(dump_attention) if dump_attention is not None else None

    results = run_jobs(lambda ex: _pseudo_label(teacher, ex, cfg, decoder_digest, teacher_digest, dump),
        corpus.examples, workers)

    records, failures = [], []
    for ex, res in zip(corpus, results):
        if isinstance(res, BaseException):
            log.warning("pseudo label for %s failed: %s", ex.id, res)
            failures.append((ex.id, str(res)))
        else:
            records.append(res)

    log.info("%i pseudo labels, %i failures (teacher %s)", len(records), len(failures), teacher_digest[:12])
    if len(failures) > MAX_FAILURE_RATE * len(corpus):
        raise DistillationError(f"{len(failures)} of {len(corpus)} documents failed to decode, e.g. "
            f"{failures[0][0]}: {failures[0][1]}")
    return PseudoCorpus(records, teacher_digest, decoder_digest, failures)


# --- students ---

def select_layers(teacher_layers:int, student_layers:int, selection:str) -> List[int]:
    """Teacher layer copied into each student layer. maximally_spaced rounds j * (L - 1) / (k - 1) half up"""
    if selection not in SELECTIONS:
        raise InvalidArgument(f"selection must be one of {SELECTIONS}, got {selection!r}")
    if not 1 <= student_layers <= teacher_layers:
        raise InvalidArgument(f"can not take {student_layers} layers from {teacher_layers}")

    if selection == "first_k" or student_layers == teacher_layers:
        return list(range(student_layers))
    if student_layers == 1:
        return [0]
    L, k = teacher_layers, student_layers
    # integer half-up rounding of j*(L-1)/(k-1)
    return [(2 * j * (L - 1) + (k - 1)) // (2 * (k - 1)) for j in range(k)]


WIDTH_FIELDS = ("d_model", "n_heads", "ffn_dim", "vocab_size", "positional")


def init_student_from_teacher(teacher:Transformer, student_config:ModelConfig,
        selection:str="maximally_spaced") -> Transformer:
    """Copy embeddings, output projection and the selected encoder/decoder layers into a smaller model"""
    tc = teacher.config
    for name in WIDTH_FIELDS:
        if getattr(tc, name) != getattr(student_config, name):
            raise InvalidArgument(f"student {name}={getattr(student_config, name)} differs from teacher's {getattr(tc, name)}")
    if student_config.max_len > tc.max_len:
        raise InvalidArgument(f"student max_len {student_config.max_len} exceeds teacher's {tc.max_len}")

    remap = {
        "encoder": select_layers(tc.encoder_layers, student_config.encoder_layers, selection),
        "decoder": select_layers(tc.decoder_layers, student_config.decoder_layers, selection),
    }
    log.info("student layers: encoder %s, decoder %s", remap["encoder"], remap["decoder"])

    tensors = {}
    for name, shape in parameter_shapes(student_config):
        parts = name.split(".")
        if parts[0] in remap and parts[1].isdigit():
            parts[1] = str(remap[parts[0]][int(parts[1])])
        data = teacher.params[".".join(parts)].data
        if name.endswith("positions"):
            data = data[:shape[0]]
        tensors[name] = data.copy()

    params = Parameters({n: Tensor(a, requires_grad=True, name=n) for n, a in tensors.items()})
    return Transformer(student_config, params, teacher.vocab)


# --- evaluation ---

@dataclass
class Evaluation:
    report: MetricsReport
    outputs: Dict[str, List[str]]
    results: Dict[str, DecodeResult]
    # wall-time of each document's decode
    seconds: Dict[str, float] = field(default_factory=dict)


def _timed_decode(model:Transformer, ex:Example, cfg:BeamConfig) -> Tuple[DecodeResult, float]:
    start = perf_counter()
    result = decode(model.vocab.encode(ex.document), model, cfg, document_rng(cfg.seed, ex.id))
    return result, perf_counter() - start


def decode_corpus(model:Transformer, corpus:Corpus, cfg:BeamConfig, workers:int=1) \
        -> Tuple[Dict[str, DecodeResult], Dict[str, float]]:
    """Decode every document, keeping the wall-time each decode took"""
    if model.vocab is None:
        raise InvalidArgument("model has no vocabulary")
    timed = run_jobs(lambda ex: _timed_decode(model, ex, cfg), corpus.examples, workers)
    for ex, res in zip(corpus, timed):
        if isinstance(res, BaseException):
            raise DistillationError(f"decoding {ex.id} failed: {res}") from res
    ids = corpus.ids()
    return {i: r for i, (r, _) in zip(ids, timed)}, {i: s for i, (_, s) in zip(ids, timed)}


def evaluate_model(model:Transformer, corpus:Corpus, decode_cfg:BeamConfig, system:str="system",
        rouge_mode:RougeMode="f1", workers:int=1, **report_args) -> Evaluation:
    """Decode the corpus (at any temperature setting in decode_cfg) and score it against the references.
    The report also carries the parameter count and the mean decode latency per document"""
    results, seconds = decode_corpus(model, corpus, decode_cfg, workers)
    outputs = {i: model.vocab.decode(r.tokens, strip_special=True) for i, r in results.items()}
    traces = [r.attention for r in results.values() if r.attention is not None]
    report = build_report(system, outputs, corpus, rouge_mode, traces=traces or None, seed=decode_cfg.seed,
        **report_args)
    report.parameters = model.params.num_elements()
    report.latency_ms = 1000.0 * float(np.mean(list(seconds.values())))
    log.info("%s: %i parameters, %.1f ms per document", system, report.parameters, report.latency_ms)
    return Evaluation(report, outputs, results, seconds)


# --- experiment grids ---

@dataclass
class GridSetting:
    label: str
    decode: Optional[BeamConfig] = None
    # train the student on the gold summaries
    gold: bool = False


GridItem = Union[float, Tuple[float, float], AttentionTemperatures, str, GridSetting]


def setting_label(item:GridItem) -> str:
    if isinstance(item, GridSetting):
        return item.label
    if item == "gold":
        return "gold"
    if isinstance(item, AttentionTemperatures):
        if item.is_uniform:
            return f"lambda={item.lambda_enc:g}"
        return ",".join(f"{k}={v:g}" for k, v in item.to_dict().items())
    if isinstance(item, (tuple, list)):
        return f"lambda=U[{item[0]:g},{item[1]:g}]"
    return f"lambda={float(item):g}"


def expand_grid(items:Sequence[GridItem], base:BeamConfig) -> List[GridSetting]:
    settings = []
    for item in items:
        if isinstance(item, GridSetting):
            settings.append(item)
        elif item == "gold":
            settings.append(GridSetting("gold", None, gold=True))
        elif isinstance(item, str):
            raise InvalidArgument(f"unknown grid item {item!r}")
        else:
            settings.append(GridSetting(setting_label(item), with_lambda(base, item)))

    labels = [s.label for s in settings]
    if len(set(labels)) != len(labels):
        raise InvalidArgument(f"duplicate grid settings: {labels}")
    return settings


def sweep_settings(base:BeamConfig, name:str, values:Sequence[Any]) -> List[GridSetting]:
    """Vary one decoding field, e.g. the length penalty"""
    if name not in {f.name for f in fields(BeamConfig)}:
        raise InvalidArgument(f"unknown decoding field {name!r}")
    return [GridSetting(f"{name}={v:g}" if isinstance(v, float) else f"{name}={v}", replace(base, **{name: v}))
        for v in values]


REGULAR_GRID = [1.0]
TEMPERATURE_GRID = [1.0, 1.5, 2.0, (1.0, 2.0)]
LAMBDA_SWEEP = [0.75, 1.0, 1.5, 2.0, 2.5, 3.0]
ATTENTION_ABLATION = [
    AttentionTemperatures.uniform(2.0),
    AttentionTemperatures(1.0, 2.0, 2.0),
    AttentionTemperatures(2.0, 1.0, 2.0),
    AttentionTemperatures(2.0, 2.0, 1.0),
]
LENGTH_PENALTY_SWEEP = [0.5, 1.0, 2.0]
OUTPUT_TEMPERATURE_SWEEP = [0.5, 1.0, 1.5]

GRIDS = {
    "regular": REGULAR_GRID,
    "temperature": TEMPERATURE_GRID,
    "lambda-sweep": LAMBDA_SWEEP,
    "attention-ablation": ATTENTION_ABLATION,
}


@dataclass
class SettingResult:
    label: str
    student: Transformer
    report: MetricsReport
    pseudo: Optional[PseudoCorpus] = None
    pseudo_report: Optional[MetricsReport] = None
    artifacts: Dict[str, str] = field(default_factory=dict)


def _require_split(corpus:Corpus, name:str) -> Corpus:
    part = corpus.split(name)
    if len(part) == 0:
        raise InvalidArgument(f"corpus has no {name!r} examples")
    return part


def run_distillation(teacher:Transformer, corpus:Corpus, student_config:ModelConfig, decode_cfg:BeamConfig,
        lambda_grid:Sequence[GridItem], train_config:Optional[TrainConfig]=None, selection:str="maximally_spaced",
        eval_cfg:Optional[BeamConfig]=None, out_dir:Union[str, Path, None]=None, workers:int=1,
        rouge_mode:RougeMode="f1") -> List[SettingResult]:
    """For each setting: pseudo-label the train split, train a student from the same initial weights on
    those labels, evaluate it on the test split. Every student starts from the same teacher-derived
    weights and the same training seed, so settings differ only through their pseudo labels."""
    train_config = train_config or TrainConfig()
    eval_cfg = eval_cfg or replace(decode_cfg, temperatures=AttentionTemperatures(), lambda_range=None, pinned={},
        output_temperature=1.0, sampler="beam")
    settings = expand_grid(lambda_grid, decode_cfg)

    train, test = _require_split(corpus, "train"), _require_split(corpus, "test")
    valid = corpus.split("valid")
    student_init = init_student_from_teacher(teacher, student_config, selection)

    out = Path(out_dir) if out_dir is not None else None
    manifest = {"teacher_digest": teacher.digest(), "student_config": student_config.to_dict(),
        "train_config": train_config.to_dict(), "eval_decoder": eval_cfg.to_dict(), "selection": selection,
        "settings": []}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        manifest["teacher_file"] = "teacher.bin"
        teacher.save(out / "teacher.bin")

    results = []
    for setting in settings:
        log.info("setting %s", setting.label)
        pseudo, pseudo_report = None, None
        if setting.gold:
            train_corpus = train
        else:
            pseudo = generate_pseudo_labels(teacher, train, setting.decode, workers=workers)
            train_corpus = pseudo.to_corpus()
            pseudo_report = build_report(f"{setting.label}/pseudo", {r.doc_id: r.summary for r in pseudo.records},
                gold_for_pseudo(train, pseudo), rouge_mode)

        trained = train_model(train_corpus, train_config, init=student_init, valid=valid)
        evaluation = evaluate_model(trained.model, test, eval_cfg, setting.label, rouge_mode, workers)
        result = SettingResult(setting.label, trained.model, evaluation.report, pseudo, pseudo_report)

        if out is not None:
            result.artifacts = _persist_setting(out, result, [s["dir"] for s in manifest["settings"]])
            entry = {"label": setting.label, "gold": setting.gold,
                "decoder": setting.decode.to_dict() if setting.decode else None, **result.artifacts}
            manifest["settings"].append(entry)
        results.append(result)

    if out is not None:
        (out / PROVENANCE_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return results


def gold_for_pseudo(train:Corpus, pseudo:PseudoCorpus) -> Corpus:
    """Gold examples of the documents that got a pseudo label, in pseudo-label order"""
    kept = {r.doc_id for r in pseudo.records}
    return Corpus(ex for ex in train if ex.id in kept)


def _persist_setting(out:Path, result:SettingResult, taken:Sequence[str]) -> Dict[str, str]:
    """Write the setting's artifacts into its own directory, return their digests"""
    d = out / unique_name(safe_filename(result.label), taken)
    d.mkdir(parents=True, exist_ok=True)
    artifacts = {"dir": d.name}
    if result.pseudo is not None:
        artifacts["pseudo_digest"] = result.pseudo.write(d / "pseudo.jsonl")
        artifacts["pseudo_teacher_digest"] = result.pseudo.teacher_digest
    artifacts["student_digest"] = result.student.save(d / "student.bin")
    result.report.extra["student_digest"] = artifacts["student_digest"]
    result.report.extra["trained_on"] = artifacts.get("pseudo_digest", "gold")
    result.report.to_json(d / "report.json")
    artifacts["report_digest"] = sha256_output(d / "report.json")
    if result.pseudo_report is not None:
        result.pseudo_report.to_json(d / "pseudo_report.json")
    return artifacts


def verify_manifest(path:Union[str, Path]) -> Dict[str, Any]:
    """Check every artifact against its recorded digest and the teacher -> pseudo labels -> student chain"""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DistillationError(f"can not read manifest {path}: {e}") from e
    root = path.parent
    problems = []

    def check(file:Path, digest:str):
        if not file.exists():
            problems.append(f"{file} is missing")
        elif sha256_output(file) != digest:
            problems.append(f"{file} does not match its digest")

    teacher_digest = manifest.get("teacher_digest")
    if "teacher_file" in manifest:
        check(root / manifest["teacher_file"], teacher_digest)

    for entry in manifest.get("settings", []):
        d = root / entry["dir"]
        check(d / "student.bin", entry["student_digest"])
        check(d / "report.json", entry["report_digest"])
        if "pseudo_digest" in entry:
            check(d / "pseudo.jsonl", entry["pseudo_digest"])
            if entry.get("pseudo_teacher_digest") != teacher_digest:
                problems.append(f"{entry['label']}: pseudo labels come from another teacher")
            elif (d / "pseudo.jsonl").exists():
                try:
                    records = PseudoCorpus.load(d / "pseudo.jsonl").records
                except LabError as e:
                    problems.append(f"{entry['label']}: {e}")
                    records = []
                if any(r.teacher_digest != teacher_digest for r in records):
                    problems.append(f"{entry['label']}: pseudo label records name another teacher")
        if (d / "report.json").exists():
            report = json.loads((d / "report.json").read_text(encoding="utf-8"))
            trained_on = report.get("extra", {}).get("trained_on")
            if trained_on != entry.get("pseudo_digest", "gold"):
                problems.append(f"{entry['label']}: student was trained on {trained_on}")

    if problems:
        raise DistillationError("manifest check failed: " + "; ".join(problems))
    log.info("manifest %s verified, %i settings", path, len(manifest.get("settings", [])))
    return manifest
