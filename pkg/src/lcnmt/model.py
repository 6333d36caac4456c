"""Miniature pre-norm transformer encoder-decoder with an optional memory sublayer.

Parameters live in a flat ``dict`` of named :class:`~lcnmt.tensor.Tensor`
objects so they can be checkpointed, optimised and gradient-checked without
any module machinery. The memory sublayer, when configured, sits inside one
encoder block between self-attention and the feed-forward sublayer.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, LengthError
from .memory import K_NONE, SRC_EMBED, TGT_EMBED, V_NONE, ConstraintMemory, memory_attention
from .rng import SplitMix64, derive_seed
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
NEG_INF = -1e9

Params = Dict[str, Tensor]


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    n_blocks: int = 6
    n_heads: int = 4
    ffn_width: int = 128
    memory_block: Optional[int] = 2
    memory_heads: int = 1
    lambda_att: float = 1.0
    max_len: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.src_vocab < 1 or self.tgt_vocab < 1:
            raise ConfigError("vocabulary sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.memory_block is not None:
            if not 1 <= self.memory_block <= self.n_blocks:
                raise ConfigError(f"memory_block {self.memory_block} outside 1..{self.n_blocks}")
            if self.d_model % self.memory_heads:
                raise ConfigError(f"d_model {self.d_model} not divisible by memory_heads {self.memory_heads}")
        if self.lambda_att < 0:
            raise ConfigError("lambda_att must be >= 0")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")

    @property
    def has_memory(self) -> bool:
        return self.memory_block is not None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncoderOutput:
    """Encoder states for one sentence (m, d) and, with memory, its slot probs (m, l)."""

    hidden: Tensor
    memory_probs: Optional[Tensor] = None
    src_mask: Optional[np.ndarray] = None


# ---------------------------------------------------------------- parameters


def _attn_shapes(prefix: str, d: int) -> dict:
    out = {}
    for w in ("q", "k", "v", "o"):
        out[f"{prefix}.w{w}"] = ("dense", (d, d))
        out[f"{prefix}.b{w}"] = ("zeros", (d,))
    return out


def _ln_shapes(prefix: str, d: int) -> dict:
    return {f"{prefix}.g": ("ones", (d,)), f"{prefix}.b": ("zeros", (d,))}


def _ffn_shapes(prefix: str, d: int, f: int) -> dict:
    return {
        f"{prefix}.w1": ("dense", (d, f)),
        f"{prefix}.b1": ("zeros", (f,)),
        f"{prefix}.w2": ("dense", (f, d)),
        f"{prefix}.b2": ("zeros", (d,)),
    }


def param_schema(config: ModelConfig) -> dict:
    """Name -> (initialiser kind, shape) for every tensor the config needs."""
    d, f = config.d_model, config.ffn_width
    schema = {
        SRC_EMBED: ("embed", (config.src_vocab, d)),
        TGT_EMBED: ("embed", (config.tgt_vocab, d)),
    }
    for b in range(1, config.n_blocks + 1):
        p = f"enc.{b}"
        schema.update(_ln_shapes(f"{p}.ln_attn", d))
        schema.update(_attn_shapes(f"{p}.attn", d))
        if config.memory_block == b:
            schema.update(_ln_shapes(f"{p}.ln_mem", d))
            schema[f"{p}.mem.wq"] = ("dense", (d, d))
        schema.update(_ln_shapes(f"{p}.ln_ffn", d))
        schema.update(_ffn_shapes(f"{p}.ffn", d, f))
    schema.update(_ln_shapes("enc.ln_out", d))
    for b in range(1, config.n_blocks + 1):
        p = f"dec.{b}"
        schema.update(_ln_shapes(f"{p}.ln_self", d))
        schema.update(_attn_shapes(f"{p}.self", d))
        schema.update(_ln_shapes(f"{p}.ln_cross", d))
        schema.update(_attn_shapes(f"{p}.cross", d))
        schema.update(_ln_shapes(f"{p}.ln_ffn", d))
        schema.update(_ffn_shapes(f"{p}.ffn", d, f))
    schema.update(_ln_shapes("dec.ln_out", d))
    schema["out.w"] = ("dense", (d, config.tgt_vocab))
    schema["out.b"] = ("zeros", (config.tgt_vocab,))
    if config.has_memory:
        schema[K_NONE] = ("embed", (d,))
        schema[V_NONE] = ("embed", (d,))
    return schema


def init_params(config: ModelConfig, seed: int = 0, dtype=None) -> Params:
    """Seeded initialisation; each tensor draws from its own name-derived stream.

    Because streams are keyed by name, a base and a memory-augmented model
    built from the same seed share every tensor they have in common.
    """
    dtype = np.dtype(dtype or T.get_default_dtype())
    params: Params = {}
    for name, (kind, shape) in param_schema(config).items():
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            fan_in = config.d_model if kind == "embed" else shape[0]
            arr = SplitMix64(derive_seed(seed, name)).normal(shape, std=1.0 / math.sqrt(fan_in))
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)
    return params


def schema_diff(config: ModelConfig, names) -> tuple:
    """(missing, extra) tensor names relative to what ``config`` expects."""
    want = set(param_schema(config))
    have = set(names)
    return sorted(want - have), sorted(have - want)


# ---------------------------------------------------------------- building blocks


def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange((d + 1) // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def _ln(params: Params, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    bsz, length, d = x.shape
    return T.transpose(T.reshape(x, (bsz, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    bsz, h, length, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (bsz, length, h * dh))


def attention_kv(params: Params, prefix: str, source: Tensor, n_heads: int):
    k = _split_heads(_linear(source, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), n_heads)
    v = _split_heads(_linear(source, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), n_heads)
    return k, v


def multi_head_attention(params, prefix, query, source, blocked, n_heads, kv=None) -> Tensor:
    """Standard multi-head attention; ``blocked`` is True where a key must be ignored."""
    q = _split_heads(_linear(query, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), n_heads)
    k, v = kv if kv is not None else attention_kv(params, prefix, source, n_heads)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(q.shape[-1]))
    if blocked is not None:
        scores = T.masked_fill(scores, blocked, NEG_INF)
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    return _linear(_merge_heads(ctx), params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ffn(params: Params, prefix: str, x: Tensor) -> Tensor:
    h = T.relu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _embed(table: Tensor, ids: np.ndarray, d: int) -> Tensor:
    pe = positional_encoding(ids.shape[1], d).astype(table.dtype)
    return T.add(T.embedding(table, ids) * math.sqrt(d), pe)


# ---------------------------------------------------------------- batched forward


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    width = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _check_tokens(ids: np.ndarray, vocab: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"{what} token index outside vocabulary of {vocab}")


def encode_batch(
    params: Params,
    config: ModelConfig,
    src: np.ndarray,
    lengths: Sequence[int],
    memory: Optional[ConstraintMemory] = None,
):
    """Encode a padded (B, S) batch. Returns ``(hidden (B,S,d), probs or None, valid mask)``."""
    src = np.asarray(src, dtype=np.int64)
    if src.shape[1] > config.max_len:
        raise LengthError(f"source length {src.shape[1]} exceeds max_len {config.max_len}")
    if any(n < 1 for n in lengths):
        raise LengthError("source sentences must be nonempty")
    _check_tokens(src, config.src_vocab, "source")
    if memory is not None and not config.has_memory:
        raise ConfigError("memory supplied to a model without a memory sublayer")
    valid = np.arange(src.shape[1])[None, :] < np.asarray(lengths)[:, None]
    blocked = ~valid[:, None, None, :]
    x = _embed(params[SRC_EMBED], src, config.d_model)
    probs = None
    for b in range(1, config.n_blocks + 1):
        p = f"enc.{b}"
        h = _ln(params, f"{p}.ln_attn", x)
        x = T.add(x, multi_head_attention(params, f"{p}.attn", h, h, blocked, config.n_heads))
        if memory is not None and b == config.memory_block:
            h = _ln(params, f"{p}.ln_mem", x)
            q = T.matmul(h, params[f"{p}.mem.wq"])
            ctx, probs = memory_attention(q, memory, config.memory_heads)
            x = T.add(x, ctx)
        h = _ln(params, f"{p}.ln_ffn", x)
        x = T.add(x, _ffn(params, f"{p}.ffn", h))
    return _ln(params, "enc.ln_out", x), probs, valid


def decode_batch(
    params: Params,
    config: ModelConfig,
    enc_hidden: Tensor,
    src_valid: np.ndarray,
    tgt_in: np.ndarray,
    cross_kv: Optional[list] = None,
) -> Tensor:
    """Teacher-forced decoder logits (B, T, v_t) for padded inputs starting with BOS.

    ``enc_hidden`` may have batch size 1 and is then shared by every row.
    """
    tgt_in = np.asarray(tgt_in, dtype=np.int64)
    length = tgt_in.shape[1]
    if length > config.max_len:
        raise LengthError(f"target length {length} exceeds max_len {config.max_len}")
    _check_tokens(tgt_in, config.tgt_vocab, "target")
    causal = np.triu(np.ones((length, length), dtype=bool), k=1)[None, None]
    src_blocked = ~np.asarray(src_valid)[:, None, None, :]
    y = _embed(params[TGT_EMBED], tgt_in, config.d_model)
    for b in range(1, config.n_blocks + 1):
        p = f"dec.{b}"
        h = _ln(params, f"{p}.ln_self", y)
        y = T.add(y, multi_head_attention(params, f"{p}.self", h, h, causal, config.n_heads))
        h = _ln(params, f"{p}.ln_cross", y)
        kv = cross_kv[b - 1] if cross_kv is not None else None
        y = T.add(y, multi_head_attention(params, f"{p}.cross", h, enc_hidden, src_blocked, config.n_heads, kv=kv))
        h = _ln(params, f"{p}.ln_ffn", y)
        y = T.add(y, _ffn(params, f"{p}.ffn", h))
    y = _ln(params, "dec.ln_out", y)
    return _linear(y, params["out.w"], params["out.b"])


def teacher_forcing(targets: Sequence[Sequence[int]]):
    """Decoder inputs ``[BOS] + y[:-1]`` and outputs ``y`` for EOS-terminated targets, padded."""
    tgt_in = pad_batch([[BOS] + list(t[:-1]) for t in targets])
    tgt_out = pad_batch([list(t) for t in targets])
    return tgt_in, tgt_out


# ---------------------------------------------------------------- single-sentence API


def encode(params: Params, config: ModelConfig, source_tokens: Sequence[int]) -> EncoderOutput:
    """Context states for one source sentence, memory sublayer bypassed."""
    hidden, _, valid = encode_batch(params, config, np.asarray([list(source_tokens)]), [len(source_tokens)])
    return EncoderOutput(T.reshape(hidden, hidden.shape[1:]), None, valid)


def encode_with_memory(
    params: Params, config: ModelConfig, source_tokens: Sequence[int], memory: ConstraintMemory
) -> EncoderOutput:
    """Memory-augmented context states for one sentence plus its (m, l) slot probabilities."""
    if not config.has_memory:
        raise ConfigError("model was built without a memory sublayer")
    hidden, probs, valid = encode_batch(
        params, config, np.asarray([list(source_tokens)]), [len(source_tokens)], memory
    )
    return EncoderOutput(T.reshape(hidden, hidden.shape[1:]), T.reshape(probs, probs.shape[1:]), valid)


def _enc_batch(enc: EncoderOutput):
    hidden = T.reshape(enc.hidden, (1,) + enc.hidden.shape)
    valid = enc.src_mask if enc.src_mask is not None else np.ones((1, enc.hidden.shape[0]), dtype=bool)
    return hidden, valid


def _check_prefix(prefix: Sequence[int], config: ModelConfig) -> None:
    if not prefix or prefix[0] != BOS:
        raise ValueError("prefix must start with BOS")
    if len(prefix) > config.max_len:
        raise LengthError(f"prefix length {len(prefix)} exceeds max_len {config.max_len}")


def decode_logits(params: Params, config: ModelConfig, enc: EncoderOutput, prefix: Sequence[int]) -> Tensor:
    """Logits (len(prefix), v_t); row i predicts the token after ``prefix[:i+1]``."""
    _check_prefix(prefix, config)
    hidden, valid = _enc_batch(enc)
    logits = decode_batch(params, config, hidden, valid, np.asarray([list(prefix)]))
    return T.reshape(logits, logits.shape[1:])


def decode_step(params: Params, config: ModelConfig, enc: EncoderOutput, prefix: Sequence[int]) -> np.ndarray:
    """Next-token logits after ``prefix``."""
    with T.no_grad():
        return decode_logits(params, config, enc, prefix).data[-1].copy()


def sequence_logprob(params: Params, config: ModelConfig, enc: EncoderOutput, target_tokens: Sequence[int]) -> float:
    """Sum of per-step log-probabilities of an EOS-terminated target."""
    target = list(target_tokens)
    if not target or target[-1] != EOS:
        raise ValueError("target must end with EOS")
    with T.no_grad():
        logits = decode_logits(params, config, enc, [BOS] + target[:-1]).data.astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(logp[np.arange(len(target)), target].sum())


class StepScorer:
    """Scores beams of equal-length prefixes against one encoded sentence.

    Cross-attention keys/values are computed once per sentence. Every call
    adds the number of scored rows to ``forward_calls``.
    """

    def __init__(self, params: Params, config: ModelConfig, enc: EncoderOutput):
        self.params = params
        self.config = config
        self.hidden, self.valid = _enc_batch(enc)
        with T.no_grad():
            self.cross_kv = [
                attention_kv(params, f"dec.{b}.cross", self.hidden, config.n_heads)
                for b in range(1, config.n_blocks + 1)
            ]
        self.forward_calls = 0
        self.calls_per_step: list = []

    @property
    def vocab_size(self) -> int:
        return self.config.tgt_vocab

    def __call__(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Log-probabilities (len(prefixes), v_t) of the next token, float64."""
        ids = np.asarray([list(p) for p in prefixes], dtype=np.int64)
        with T.no_grad():
            logits = decode_batch(self.params, self.config, self.hidden, self.valid, ids, self.cross_kv)
        last = logits.data[:, -1, :].astype(np.float64)
        shifted = last - last.max(axis=1, keepdims=True)
        self.forward_calls += len(prefixes)
        self.calls_per_step.append(len(prefixes))
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
