"""
Encoder-decoder transformer with a separate attention temperature coefficient for
encoder self-attention, decoder self-attention and decoder cross-attention
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, ops
from .codec.model_file import model_file, parse_model_file
from .corpus import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocabulary
from .errors import InvalidArgument, ParseError
from .util import sha256_bytes

log = logging.getLogger(__name__)


POSITIONAL_KINDS = ("learned", "sinusoidal")
INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int = 2000
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 256
    max_len: int = 256
    dropout: float = 0.1
    positional: str = "learned"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "encoder_layers", "decoder_layers", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise InvalidArgument(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgument(f"dropout must be in [0, 1), got {self.dropout}")
        if self.positional not in POSITIONAL_KINDS:
            raise InvalidArgument(f"positional must be one of {POSITIONAL_KINDS}, got {self.positional!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d:Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


ATTENTION_FAMILIES = ("enc", "cross", "dec")


@dataclass(frozen=True)
class AttentionTemperatures:
    """Coefficients lambda inside tau = sqrt(lambda * d) for each attention family"""
    lambda_enc: float = 1.0
    lambda_cross: float = 1.0
    lambda_dec: float = 1.0

    def __post_init__(self):
        for name in ("lambda_enc", "lambda_cross", "lambda_dec"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise InvalidArgument(f"{name} must be a positive number, got {value}")

    @classmethod
    def uniform(cls, lam:float) -> "AttentionTemperatures":
        return cls(lam, lam, lam)

    def family(self, name:str) -> float:
        return getattr(self, f"lambda_{name}")

    @property
    def is_uniform(self) -> bool:
        return self.lambda_enc == self.lambda_cross == self.lambda_dec

    def to_dict(self) -> Dict[str, float]:
        return {f: self.family(f) for f in ATTENTION_FAMILIES}

    @classmethod
    def from_dict(cls, d:Dict[str, float]) -> "AttentionTemperatures":
        unknown = set(d) - set(ATTENTION_FAMILIES)
        if unknown:
            raise InvalidArgument(f"unknown attention families: {sorted(unknown)}")
        return cls(*(float(d.get(f, 1.0)) for f in ATTENTION_FAMILIES))


TRAINING_TEMPERATURES = AttentionTemperatures()


def parameter_shapes(config:ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Declared order and shape of every named parameter"""
    D, F, V = config.d_model, config.ffn_dim, config.vocab_size
    shapes = [("embed.tokens", (V, D))]
    if config.positional == "learned":
        shapes += [("encoder.positions", (config.max_len, D)), ("decoder.positions", (config.max_len, D))]

    def attention(prefix):
        return [(f"{prefix}.{p}.{kind}", (D, D) if kind == "weight" else (D,))
            for p in ("q", "k", "v", "o") for kind in ("weight", "bias")]

    def norm(prefix):
        return [(f"{prefix}.scale", (D,)), (f"{prefix}.offset", (D,))]

    def ffn(prefix):
        return [(f"{prefix}.in.weight", (D, F)), (f"{prefix}.in.bias", (F,)),
            (f"{prefix}.out.weight", (F, D)), (f"{prefix}.out.bias", (D,))]

    for i in range(config.encoder_layers):
        p = f"encoder.{i}"
        shapes += norm(f"{p}.attn_norm") + attention(f"{p}.attn") + norm(f"{p}.ffn_norm") + ffn(f"{p}.ffn")
    shapes += norm("encoder.norm")

    for i in range(config.decoder_layers):
        p = f"decoder.{i}"
        shapes += (norm(f"{p}.self_attn_norm") + attention(f"{p}.self_attn")
            + norm(f"{p}.cross_attn_norm") + attention(f"{p}.cross_attn")
            + norm(f"{p}.ffn_norm") + ffn(f"{p}.ffn"))
    shapes += norm("decoder.norm")

    shapes += [("output.weight", (D, V)), ("output.bias", (V,))]
    return shapes


class Parameters:
    """Named tensors in declared order"""

    def __init__(self, tensors:Dict[str, Tensor]):
        self.tensors = tensors


    @classmethod
    def initialize(cls, config:ModelConfig, seed:int=0) -> "Parameters":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(config):
            if name.endswith(".scale"):
                data = np.ones(shape)
            elif name.endswith((".bias", ".offset")):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, INIT_STD, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(tensors)


    def __getitem__(self, name:str) -> Tensor:
        return self.tensors[name]


    def __contains__(self, name:str) -> bool:
        return name in self.tensors


    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)


    def __len__(self):
        return len(self.tensors)


    def items(self):
        return self.tensors.items()


    def num_elements(self) -> int:
        return sum(t.size for t in self.tensors.values())


    def clone(self) -> "Parameters":
        return Parameters({n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()})


    def check_layout(self, config:ModelConfig):
        expected = parameter_shapes(config)
        if [n for n, _ in expected] != list(self.tensors):
            raise InvalidArgument("parameter names do not match the model config")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise InvalidArgument(f"parameter {name} has shape {self.tensors[name].shape}, config wants {shape}")


def sinusoidal_positions(length:int, d_model:int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def scaled_attention(Q, K, V, mask:Optional[np.ndarray]=None, lam:float=1.0) -> Tuple[Tensor, Tensor]:
    """softmax(Q K^T / tau) V with tau = sqrt(lam * d). Leading axes broadcast (batch, heads).
    mask is True where attention is allowed; masked weights are exactly zero."""
    Q, K, V = (t if isinstance(t, Tensor) else Tensor(t) for t in (Q, K, V))
    d = Q.shape[-1]
    if K.shape[-1] != d or V.shape[-2] != K.shape[-2]:
        raise InvalidArgument(f"inconsistent attention shapes Q{Q.shape} K{K.shape} V{V.shape}")
    if not lam > 0:
        raise InvalidArgument(f"attention temperature coefficient must be positive, got {lam}")

    tau = math.sqrt(lam * d)
    scores = ops.matmul(Q, ops.swap_last(K))
    weights = ops.softmax(scores, axis=-1, tau=tau, mask=mask)
    return ops.matmul(weights, V), weights


class Transformer:
    """Parameters plus the config and vocabulary they were built for. Also a decoding scorer"""

    bos_id = BOS_ID
    eos_id = EOS_ID
    banned_ids = (PAD_ID, UNK_ID, BOS_ID)

    def __init__(self, config:ModelConfig, params:Parameters, vocab:Optional[Vocabulary]=None):
        params.check_layout(config)
        if vocab is not None and len(vocab) != config.vocab_size:
            raise InvalidArgument(f"vocabulary has {len(vocab)} tokens, model expects {config.vocab_size}")
        self.config = config
        self.params = params
        self.vocab = vocab
        self._sinusoid = sinusoidal_positions(config.max_len, config.d_model) if config.positional == "sinusoidal" else None


    @classmethod
    def initialize(cls, config:ModelConfig, seed:int=0, vocab:Optional[Vocabulary]=None) -> "Transformer":
        return cls(config, Parameters.initialize(config, seed), vocab)


    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size


    def clone(self) -> "Transformer":
        return Transformer(self.config, self.params.clone(), self.vocab)


    # --- building blocks ---

    def _p(self, name:str) -> Tensor:
        return self.params.tensors[name]


    def _linear(self, x, prefix:str) -> Tensor:
        return ops.add(ops.matmul(x, self._p(f"{prefix}.weight")), self._p(f"{prefix}.bias"))


    def _norm(self, x, prefix:str) -> Tensor:
        return ops.layer_norm(x, self._p(f"{prefix}.scale"), self._p(f"{prefix}.offset"))


    def _split_heads(self, x:Tensor) -> Tensor:
        B, T, _ = x.shape
        H, d = self.config.n_heads, self.config.head_dim
        return ops.transpose(ops.reshape(x, (B, T, H, d)), (0, 2, 1, 3))


    def _merge_heads(self, x:Tensor) -> Tensor:
        B, H, T, d = x.shape
        return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, T, H * d))


    def _attention(self, prefix:str, x_q:Tensor, x_kv:Tensor, mask:np.ndarray, lam:float) -> Tuple[Tensor, Tensor]:
        q = self._split_heads(self._linear(x_q, f"{prefix}.q"))
        k = self._split_heads(self._linear(x_kv, f"{prefix}.k"))
        v = self._split_heads(self._linear(x_kv, f"{prefix}.v"))
        context, weights = scaled_attention(q, k, v, mask, lam)
        return self._linear(self._merge_heads(context), f"{prefix}.o"), weights


    def _ffn(self, x:Tensor, prefix:str) -> Tensor:
        return self._linear(ops.gelu(self._linear(x, f"{prefix}.in")), f"{prefix}.out")


    def _embed(self, ids:np.ndarray, side:str, rng) -> Tensor:
        T = ids.shape[-1]
        x = ops.embedding(self._p("embed.tokens"), ids)
        if self._sinusoid is not None:
            x = ops.add(x, self._sinusoid[:T])
        else:
            x = ops.add(x, ops.embedding(self._p(f"{side}.positions"), np.arange(T)))
        return ops.dropout(x, self.config.dropout, rng)


    def _encode(self, src:np.ndarray, src_mask:np.ndarray, lam:float, rng=None) -> Tensor:
        """src: (B, S) ids, src_mask: (B, S) True on real tokens"""
        key_mask = src_mask[:, None, None, :]
        x = self._embed(src, "encoder", rng)
        for i in range(self.config.encoder_layers):
            p = f"encoder.{i}"
            h = self._norm(x, f"{p}.attn_norm")
            a, _ = self._attention(f"{p}.attn", h, h, key_mask, lam)
            x = ops.add(x, ops.dropout(a, self.config.dropout, rng))
            x = ops.add(x, ops.dropout(self._ffn(self._norm(x, f"{p}.ffn_norm"), f"{p}.ffn"), self.config.dropout, rng))
        return self._norm(x, "encoder.norm")


    def _decode(self, tgt:np.ndarray, tgt_mask:np.ndarray, enc:Tensor, src_mask:np.ndarray,
            temps:AttentionTemperatures, rng=None) -> Tuple[Tensor, List[np.ndarray]]:
        """tgt: (B, T) decoder inputs. Returns logits (B, T, V) and per-layer cross-attention (B, H, T, S)"""
        T = tgt.shape[1]
        causal = np.tril(np.ones((T, T), dtype=bool))
        self_mask = causal[None, None, :, :] & tgt_mask[:, None, None, :]
        cross_mask = src_mask[:, None, None, :]

        x = self._embed(tgt, "decoder", rng)
        cross = []
        for i in range(self.config.decoder_layers):
            p = f"decoder.{i}"
            h = self._norm(x, f"{p}.self_attn_norm")
            a, _ = self._attention(f"{p}.self_attn", h, h, self_mask, temps.lambda_dec)
            x = ops.add(x, ops.dropout(a, self.config.dropout, rng))

            h = self._norm(x, f"{p}.cross_attn_norm")
            a, w = self._attention(f"{p}.cross_attn", h, enc, cross_mask, temps.lambda_cross)
            cross.append(w.data)
            x = ops.add(x, ops.dropout(a, self.config.dropout, rng))

            x = ops.add(x, ops.dropout(self._ffn(self._norm(x, f"{p}.ffn_norm"), f"{p}.ffn"), self.config.dropout, rng))

        logits = self._linear(self._norm(x, "decoder.norm"), "output")
        return logits, cross


    def _truncate(self, ids:Sequence[int]) -> List[int]:
        ids = list(ids)
        if len(ids) > self.config.max_len:
            log.debug("truncating input of %i tokens to %i", len(ids), self.config.max_len)
            ids = ids[:self.config.max_len]
        return ids


    def _check_ids(self, ids:Sequence[int]):
        if any(i < 0 or i >= self.config.vocab_size for i in ids):
            raise InvalidArgument(f"token id outside vocabulary of {self.config.vocab_size}")


    # --- public operations ---

    def encode(self, doc_tokens:Sequence[int], temps:AttentionTemperatures=TRAINING_TEMPERATURES) -> np.ndarray:
        """Encoder states (len, d_model) of one document, dropout off"""
        ids = self._truncate(doc_tokens)
        if not ids:
            raise InvalidArgument("empty document")
        self._check_ids(ids)
        src = np.asarray([ids], dtype=np.int64)
        return self._encode(src, np.ones_like(src, dtype=bool), temps.lambda_enc).data[0]


    def decode_step(self, prefix:Sequence[int], enc_states:np.ndarray,
            temps:AttentionTemperatures=TRAINING_TEMPERATURES) -> Tuple[np.ndarray, np.ndarray]:
        """Next-token logits (vocab,) after prefix, and cross-attention (layers, heads, len(prefix), src_len)"""
        prefix = list(prefix)
        if not prefix or prefix[0] != BOS_ID:
            raise InvalidArgument("prefix must start with the start-of-sequence token")
        if len(prefix) > self.config.max_len:
            raise InvalidArgument(f"prefix of {len(prefix)} tokens exceeds max_len={self.config.max_len}")
        self._check_ids(prefix)

        enc = np.asarray(enc_states)[None]
        tgt = np.asarray([prefix], dtype=np.int64)
        src_mask = np.ones(enc.shape[:2], dtype=bool)
        logits, cross = self._decode(tgt, np.ones_like(tgt, dtype=bool), Tensor(enc), src_mask, temps)
        return logits.data[0, -1], np.stack([w[0] for w in cross])


    def batch_loss(self, docs:Sequence[Sequence[int]], summaries:Sequence[Sequence[int]], epsilon:float,
            rng:Optional[np.random.Generator]=None) -> Tensor:
        """Teacher-forced label-smoothed NLL averaged over every target token of the batch.
        Summaries are wrapped in start/end tokens. Always runs at temperature coefficient 1."""
        if len(docs) != len(summaries) or not docs:
            raise InvalidArgument("need the same, non-zero number of documents and summaries")

        docs = [self._truncate(d) for d in docs]
        summaries = [self._truncate(s) for s in summaries]
        for d, s in zip(docs, summaries):
            if not d:
                raise InvalidArgument("empty document")
            if len(s) < 2 or s[0] != BOS_ID:
                raise InvalidArgument("summary must be wrapped in start/end tokens and contain at least one target")
            self._check_ids(d)
            self._check_ids(s)

        B = len(docs)
        S = max(len(d) for d in docs)
        T = max(len(s) for s in summaries) - 1
        src = np.full((B, S), PAD_ID, dtype=np.int64)
        tgt_in = np.full((B, T), PAD_ID, dtype=np.int64)
        tgt_out = np.full((B, T), PAD_ID, dtype=np.int64)
        for b, (d, s) in enumerate(zip(docs, summaries)):
            src[b, :len(d)] = d
            tgt_in[b, :len(s) - 1] = s[:-1]
            tgt_out[b, :len(s) - 1] = s[1:]
        src_mask = np.arange(S)[None, :] < np.array([len(d) for d in docs])[:, None]
        tgt_mask = np.arange(T)[None, :] < np.array([len(s) - 1 for s in summaries])[:, None]

        enc = self._encode(src, src_mask, TRAINING_TEMPERATURES.lambda_enc, rng)
        logits, _ = self._decode(tgt_in, tgt_mask, enc, src_mask, TRAINING_TEMPERATURES, rng)
        return ops.label_smoothed_nll(logits, tgt_out, epsilon, tgt_mask)


    def forward_loss(self, doc:Sequence[int], summary:Sequence[int], epsilon:float=0.0) -> Tensor:
        """Per-token mean label-smoothed NLL of one pair under teacher forcing"""
        if len(summary) < 2:
            raise InvalidArgument("empty summary")
        return self.batch_loss([doc], [summary], epsilon)


    # --- scorer protocol used by the decoders ---

    def prepare(self, doc:Sequence[int], temps:AttentionTemperatures) -> Tuple[np.ndarray, AttentionTemperatures]:
        return self.encode(doc, temps), temps


    def next_logits(self, source:Tuple[np.ndarray, AttentionTemperatures], prefixes:np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Logits (B, vocab) for each prefix row and the last position's cross-attention (B, layers, heads, src_len)"""
        enc_states, temps = source
        if prefixes.shape[1] > self.config.max_len:
            raise InvalidArgument(f"prefix exceeds max_len={self.config.max_len}")
        enc = Tensor(enc_states[None])
        src_mask = np.ones((1, enc_states.shape[0]), dtype=bool)
        logits, cross = self._decode(prefixes, np.ones_like(prefixes, dtype=bool), enc, src_mask, temps)
        attention = np.stack([w[:, :, -1, :] for w in cross], axis=1)
        return logits.data[:, -1, :], attention


    # --- persistence ---

    def to_bytes(self) -> bytes:
        header = {"model": self.config.to_dict(), "vocab": self.vocab.to_dict() if self.vocab else None}
        return bytes(model_file(header, ((n, t.data) for n, t in self.params.items())))


    @classmethod
    def from_bytes(cls, data:bytes, source:str=None) -> "Transformer":
        header, tensors = parse_model_file(data, source)
        try:
            config = ModelConfig.from_dict(header["model"])
            vocab = Vocabulary.from_dict(header["vocab"]) if header.get("vocab") else None
        except (KeyError, TypeError, InvalidArgument) as e:
            raise ParseError(f"bad model header: {e}", path=source) from e

        params = Parameters({n: Tensor(a, requires_grad=True, name=n) for n, a in tensors})
        try:
            return cls(config, params, vocab)
        except InvalidArgument as e:
            raise ParseError(str(e), path=source) from e


    def save(self, path:Union[str, Path]) -> str:
        """Write the model file, return its digest"""
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return sha256_bytes(data)


    @classmethod
    def load(cls, path:Union[str, Path]) -> "Transformer":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


    def digest(self) -> str:
        return sha256_bytes(self.to_bytes())
