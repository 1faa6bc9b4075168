"""
Beam search and sampling decoders for any scorer (the transformer, or a toy model in tests)
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from typing_extensions import Literal, Protocol, get_args

from .autodiff.ops import _log_softmax_kernel, softmax_with_temperature
from .errors import InvalidArgument
from .model import ATTENTION_FAMILIES, AttentionTemperatures
from .util import digest_json, safe_filename

log = logging.getLogger(__name__)


Sampler = Literal["beam", "ancestral", "nucleus"]
SAMPLERS = get_args(Sampler)


class Scorer(Protocol):
    """What a decoder needs from a model"""
    bos_id: int
    eos_id: int
    banned_ids: Sequence[int]
    vocab_size: int

    def prepare(self, doc:Sequence[int], temps:AttentionTemperatures) -> Any:
        ...

    def next_logits(self, source:Any, prefixes:np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """(B, vocab) logits for each prefix row, and optionally (B, layers, heads, src_len) cross-attention"""
        ...


@dataclass
class BeamConfig:
    beam_size: int = 4
    length_penalty: float = 1.0
    # counts the end token, so 2 guarantees at least one word
    min_length: int = 2
    max_length: int = 64
    temperatures: AttentionTemperatures = field(default_factory=AttentionTemperatures)
    lambda_range: Optional[Tuple[float, float]] = None
    # families that keep a fixed coefficient while the rest take the random draw
    pinned: Dict[str, float] = field(default_factory=dict)
    output_temperature: float = 1.0
    sampler: Sampler = "beam"
    top_p: float = 1.0
    seed: int = 0
    attention_layer: Optional[int] = None
    attention_head: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.temperatures, dict):
            self.temperatures = AttentionTemperatures.from_dict(self.temperatures)
        if self.lambda_range is not None:
            self.lambda_range = tuple(float(x) for x in self.lambda_range)
        if self.beam_size < 1:
            raise InvalidArgument(f"beam_size must be at least 1, got {self.beam_size}")
        if not 1 <= self.min_length <= self.max_length:
            raise InvalidArgument(f"need 1 <= min_length <= max_length, got {self.min_length}, {self.max_length}")
        if self.lambda_range is not None:
            a, b = self.lambda_range
            if not 0 < a <= b:
                raise InvalidArgument(f"lambda range must satisfy 0 < a <= b, got [{a}, {b}]")
        unknown = set(self.pinned) - set(ATTENTION_FAMILIES)
        if unknown:
            raise InvalidArgument(f"unknown attention families: {sorted(unknown)}")
        if not self.output_temperature > 0:
            raise InvalidArgument(f"output temperature must be positive, got {self.output_temperature}")
        if self.sampler not in SAMPLERS:
            raise InvalidArgument(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if not 0 < self.top_p <= 1:
            raise InvalidArgument(f"top_p must be in (0, 1], got {self.top_p}")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["temperatures"] = self.temperatures.to_dict()
        d["lambda_range"] = list(self.lambda_range) if self.lambda_range else None
        return d

    @classmethod
    def from_dict(cls, d:Dict[str, Any]) -> "BeamConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown decoding config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return digest_json(self.to_dict())


def with_lambda(cfg:BeamConfig, setting:Union[None, float, Tuple[float, float], AttentionTemperatures]) -> BeamConfig:
    """Copy of cfg using a fixed coefficient, a random range, or explicit per-family coefficients"""
    if setting is None:
        return cfg
    if isinstance(setting, AttentionTemperatures):
        return replace(cfg, temperatures=setting, lambda_range=None)
    if isinstance(setting, (tuple, list)):
        return replace(cfg, lambda_range=tuple(setting))
    return replace(cfg, temperatures=AttentionTemperatures.uniform(float(setting)), lambda_range=None)


@dataclass
class DecodeResult:
    tokens: List[int]
    log_prob: float
    score: float
    temperatures: AttentionTemperatures
    lam: Optional[float] = None
    # (steps, src_len), averaged over layers and heads unless configured otherwise
    attention: Optional[np.ndarray] = None

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == self._eos

    _eos: int = field(default=-1, repr=False)


def draw_random_lambda(bounds:Tuple[float, float], rng:np.random.Generator) -> float:
    """lambda ~ U[a, b]"""
    a, b = bounds
    if not 0 < a <= b:
        raise InvalidArgument(f"lambda range must satisfy 0 < a <= b, got [{a}, {b}]")
    if a == b:
        return float(a)
    return float(rng.uniform(a, b))


def resolve_temperatures(cfg:BeamConfig, rng:np.random.Generator) -> Tuple[AttentionTemperatures, Optional[float]]:
    """Per-document coefficients. In range mode one draw is shared by all families not pinned"""
    if cfg.lambda_range is None:
        temps = cfg.temperatures
        return temps, (temps.lambda_enc if temps.is_uniform else None)

    lam = draw_random_lambda(cfg.lambda_range, rng)
    temps = AttentionTemperatures(*(cfg.pinned.get(f, lam) for f in ATTENTION_FAMILIES))
    return temps, lam


def apply_output_temperature(logits, T:float) -> np.ndarray:
    """Softmax of the final decoder layer at temperature T"""
    if not T > 0:
        raise InvalidArgument(f"output temperature must be positive, got {T}")
    return softmax_with_temperature(logits, T)


def top_p_distribution(probs:np.ndarray, p:float) -> np.ndarray:
    """Keep the smallest probability-sorted prefix with mass >= p, renormalised"""
    if not 0 < p <= 1:
        raise InvalidArgument(f"top_p must be in (0, 1], got {p}")
    probs = np.asarray(probs, dtype=np.float64)
    if p >= 1.0:
        return probs / probs.sum()

    order = np.argsort(-probs, kind="stable")
    mass = np.cumsum(probs[order])
    keep = min(int(np.searchsorted(mass, p * mass[-1] - 1e-12, side="left")) + 1, len(order))
    out = np.zeros_like(probs)
    out[order[:keep]] = probs[order[:keep]]
    return out / out.sum()


def _step_log_probs(logits:np.ndarray, cfg:BeamConfig, scorer:Scorer, length:int) -> np.ndarray:
    """Log-probabilities of the next token with the output temperature and the hard masks applied.
    length is the number of tokens the hypothesis will have after this step"""
    logp = _log_softmax_kernel(np.asarray(logits, dtype=np.float64) / cfg.output_temperature)
    if scorer.banned_ids:
        logp[..., list(scorer.banned_ids)] = -np.inf
    if length < cfg.min_length:
        logp[..., scorer.eos_id] = -np.inf
    return logp


def _aggregate_attention(attention:Optional[np.ndarray], cfg:BeamConfig) -> Optional[np.ndarray]:
    """(B, layers, heads, S) -> (B, S)"""
    if attention is None:
        return None
    a = attention if cfg.attention_layer is None else attention[:, cfg.attention_layer:cfg.attention_layer + 1]
    a = a if cfg.attention_head is None else a[:, :, cfg.attention_head:cfg.attention_head + 1]
    return a.mean(axis=(1, 2))


def normalized_score(log_prob:float, length:int, alpha:float) -> float:
    return log_prob / (length ** alpha)


@dataclass
class _Hyp:
    tokens: Tuple[int, ...]
    log_prob: float
    attention: Tuple[np.ndarray, ...] = ()
    step: int = 0


def _prefixes(scorer:Scorer, hyps:Sequence[_Hyp]) -> np.ndarray:
    return np.asarray([(scorer.bos_id, *h.tokens) for h in hyps], dtype=np.int64)


def _result(h:_Hyp, cfg:BeamConfig, temps:AttentionTemperatures, lam:Optional[float], eos:int) -> DecodeResult:
    attention = np.stack(h.attention) if h.attention else None
    return DecodeResult(list(h.tokens), h.log_prob, normalized_score(h.log_prob, len(h.tokens), cfg.length_penalty),
        temps, lam, attention, _eos=eos)


def _check_doc(doc:Sequence[int]):
    if len(doc) == 0:
        raise InvalidArgument("empty document")


def beam_search(doc:Sequence[int], model:Scorer, cfg:BeamConfig,
        temps:Optional[AttentionTemperatures]=None, lam:Optional[float]=None) -> DecodeResult:
    """Keeps beam_size live hypotheses. A hypothesis finishes on end-of-sequence (only among the step's
    top beam_size candidates) or at max_length; finished ones rank by log_prob / length^alpha, then
    earlier finishing step, then token order. Search stops once no live hypothesis can still overtake
    the best finished one."""
    _check_doc(doc)
    if temps is None:
        temps, lam = resolve_temperatures(cfg, np.random.default_rng(cfg.seed))

    alpha = cfg.length_penalty
    source = model.prepare(doc, temps)
    live = [_Hyp((), 0.0)]
    finished:List[_Hyp] = []

    def rank(h:_Hyp):
        return (-normalized_score(h.log_prob, len(h.tokens), alpha), h.step, h.tokens)

    for step in range(1, cfg.max_length + 1):
        logits, attention = model.next_logits(source, _prefixes(model, live))
        logp = _step_log_probs(logits, cfg, model, step)
        rows = _aggregate_attention(attention, cfg)

        totals = np.asarray([h.log_prob for h in live])[:, None] + logp
        flat = totals.reshape(-1)
        finite = np.flatnonzero(np.isfinite(flat))
        if finite.size == 0:
            break

        # at most one end-of-sequence candidate per hypothesis sits above the live cut
        want = min(cfg.beam_size + len(live), finite.size)
        threshold = np.partition(flat[finite], finite.size - want)[finite.size - want]
        chosen = finite[flat[finite] >= threshold]

        V = logp.shape[1]
        candidates = []
        for idx in chosen.tolist():
            b, tok = divmod(idx, V)
            h = live[b]
            attn = h.attention + (rows[b],) if rows is not None else ()
            candidates.append(_Hyp(h.tokens + (tok,), float(flat[idx]), attn, step))
        candidates.sort(key=lambda c: (-c.log_prob, c.tokens))

        for c in candidates[:cfg.beam_size]:
            if c.tokens[-1] == model.eos_id:
                finished.append(c)

        live = [c for c in candidates if c.tokens[-1] != model.eos_id][:cfg.beam_size]

        if step == cfg.max_length:
            finished.extend(live)
            live = []

        if not live:
            break

        if finished:
            best = min(finished, key=rank)
            best_live = max(h.log_prob for h in live)
            # most favourable length a live hypothesis can still finish at
            reach = cfg.max_length if alpha > 0 else step + 1
            if normalized_score(best.log_prob, len(best.tokens), alpha) >= normalized_score(best_live, reach, alpha):
                break

    if not finished:
        finished = live
    best = min(finished, key=rank)
    return _result(best, cfg, temps, lam, model.eos_id)


def greedy_decode(doc:Sequence[int], model:Scorer, cfg:BeamConfig, **kwargs) -> DecodeResult:
    return beam_search(doc, model, replace(cfg, beam_size=1), **kwargs)


def sample_decode(doc:Sequence[int], model:Scorer, cfg:BeamConfig, mode:str="ancestral", p:float=1.0,
        rng:Optional[np.random.Generator]=None, temps:Optional[AttentionTemperatures]=None,
        lam:Optional[float]=None) -> DecodeResult:
    """Draw one token at a time from the full distribution (ancestral) or from its top-p nucleus"""
    _check_doc(doc)
    if mode not in ("ancestral", "nucleus"):
        raise InvalidArgument(f"sampling mode must be 'ancestral' or 'nucleus', got {mode!r}")
    if not 0 < p <= 1:
        raise InvalidArgument(f"p must be in (0, 1], got {p}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if temps is None:
        temps, lam = resolve_temperatures(cfg, rng)

    source = model.prepare(doc, temps)
    hyp = _Hyp((), 0.0)

    for step in range(1, cfg.max_length + 1):
        logits, attention = model.next_logits(source, _prefixes(model, [hyp]))
        logp = _step_log_probs(logits, cfg, model, step)[0]
        rows = _aggregate_attention(attention, cfg)

        probs = np.exp(logp)
        probs /= probs.sum()
        if mode == "nucleus" and p < 1.0:
            probs = top_p_distribution(probs, p)

        tok = int(rng.choice(len(probs), p=probs))
        attn = hyp.attention + (rows[0],) if rows is not None else ()
        hyp = _Hyp(hyp.tokens + (tok,), hyp.log_prob + float(logp[tok]), attn, step)
        if tok == model.eos_id:
            break

    return _result(hyp, cfg, temps, lam, model.eos_id)


def decode(doc:Sequence[int], model:Scorer, cfg:BeamConfig, rng:Optional[np.random.Generator]=None) -> DecodeResult:
    """Resolve the document's temperatures, then run the configured sampler"""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    temps, lam = resolve_temperatures(cfg, rng)
    if cfg.sampler == "beam":
        return beam_search(doc, model, cfg, temps=temps, lam=lam)
    return sample_decode(doc, model, cfg, mode=cfg.sampler, p=cfg.top_p, rng=rng, temps=temps, lam=lam)


# --- attention dumps ---

def write_attention_dump(result:DecodeResult, doc_id:str, directory:Union[str, Path],
        tokens:Optional[List[str]]=None) -> Path:
    """One JSON file per document: {doc_id, lambda, tokens, attention}"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lam = result.lam if result.lam is not None else result.temperatures.to_dict()
    payload = {
        "doc_id": doc_id,
        "lambda": lam,
        "tokens": tokens if tokens is not None else result.tokens,
        "attention": result.attention.tolist() if result.attention is not None else [],
    }
    path = directory / f"{safe_filename(doc_id)}.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def load_attention_dumps(directory:Union[str, Path]) -> Dict[str, np.ndarray]:
    """doc_id -> (steps, src_len) trace, in file name order"""
    traces = {}
    for path in sorted(Path(directory).glob("*.json")):
        payload = json.loads(path.read_text(encoding="utf-8"))
        traces[payload["doc_id"]] = np.asarray(payload["attention"], dtype=np.float64)
    return traces
