"""External constraint memory: keys/values, memory attention and its label loss.

Each constraint pair becomes one memory slot whose key is the mean source
embedding of its source phrase and whose value is the mean target embedding
of its target phrase. A learned ``none`` slot is always appended last, so a
memory with ``l`` slots holds ``l - 1`` constraints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConstraintError, ShapeError
from .tensor import Tensor

NONE_ORIGIN = -1
LOG_EPS = 1e-9

SRC_EMBED = "src_embed"
TGT_EMBED = "tgt_embed"
K_NONE = "memory.k_none"
V_NONE = "memory.v_none"


@dataclass(frozen=True)
class ConstraintPair:
    """A source phrase that should be translated as the given target phrase.

    ``origin`` is the sentence index inside the batch and ``source_span`` the
    half-open token interval the phrase occupies in that sentence.
    """

    source: tuple
    target: tuple
    origin: int = 0
    source_span: Optional[tuple] = None
    target_span: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(self.source))
        object.__setattr__(self, "target", tuple(self.target))
        if not self.source or not self.target:
            raise ConstraintError("constraint phrases must be nonempty")
        if self.source_span is not None:
            a, b = self.source_span
            object.__setattr__(self, "source_span", (int(a), int(b)))
            if b - a != len(self.source):
                raise ConstraintError(f"source span {self.source_span} does not match phrase length {len(self.source)}")
        if self.target_span is not None:
            c, d = self.target_span
            object.__setattr__(self, "target_span", (int(c), int(d)))

    @property
    def key(self) -> tuple:
        return (self.source, self.target)


@dataclass
class ConstraintMemory:
    """Keys and values as (d_k, l) column matrices; the last column is the none slot."""

    keys: Tensor
    values: Tensor
    slot_origins: list = field(default_factory=list)

    def __post_init__(self):
        if self.keys.shape != self.values.shape or self.keys.ndim != 2:
            raise ShapeError(f"keys {self.keys.shape} and values {self.values.shape} must be equal (d, l) matrices")
        if self.keys.shape[1] < 1:
            raise ShapeError("memory needs at least the none slot")

    @property
    def size(self) -> int:
        return self.keys.shape[1]

    @property
    def width(self) -> int:
        return self.keys.shape[0]


@dataclass
class AttentionLabels:
    """1-based memory slot per source token, flattened over the batch in sentence order."""

    slots: np.ndarray
    lengths: tuple
    size: int

    def zero_based(self) -> np.ndarray:
        return self.slots - 1


def _phrase_means(table: Tensor, phrases: Sequence[tuple]) -> Tensor:
    """(n_phrases, d) matrix of mean embedding rows, as one gather and one matmul."""
    flat = [t for ph in phrases for t in ph]
    gathered = T.embedding(table, np.asarray(flat, dtype=np.int64))
    avg = np.zeros((len(phrases), len(flat)), dtype=table.dtype)
    col = 0
    for i, ph in enumerate(phrases):
        avg[i, col : col + len(ph)] = 1.0 / len(ph)
        col += len(ph)
    return T.matmul(Tensor(avg, dtype=table.dtype), gathered)


def build_memory(pairs: Sequence[ConstraintPair], params: Mapping[str, Tensor]) -> ConstraintMemory:
    """Encode ``pairs`` (in order) into a memory and append the learned none slot."""
    k_none = params[K_NONE].reshape(1, -1)
    v_none = params[V_NONE].reshape(1, -1)
    if pairs:
        for p in pairs:
            if not p.source or not p.target:
                raise ConstraintError("constraint phrases must be nonempty")
        keys = _phrase_means(params[SRC_EMBED], [p.source for p in pairs])
        values = _phrase_means(params[TGT_EMBED], [p.target for p in pairs])
        keys = T.concat([keys, k_none], axis=0)
        values = T.concat([values, v_none], axis=0)
    else:
        keys, values = k_none, v_none
    origins = [p.origin for p in pairs] + [NONE_ORIGIN]
    return ConstraintMemory(T.transpose(keys), T.transpose(values), origins)


def memory_attention(queries: Tensor, memory: ConstraintMemory, n_heads: int = 1):
    """Scaled dot-product attention of every query row over the memory slots.

    ``queries`` has shape (..., m, d_k). Returns ``(context, probs)`` with
    context (..., m, d_k) and probs (..., m, l). With ``n_heads > 1`` the
    width is split into heads and the returned probs are the head average.
    """
    d = memory.width
    if queries.shape[-1] != d:
        raise ShapeError(f"query width {queries.shape[-1]} does not match memory width {d}")
    if n_heads == 1:
        scores = T.matmul(queries, memory.keys) * (1.0 / math.sqrt(d))
        probs = T.softmax(scores, axis=-1)
        context = T.matmul(probs, T.transpose(memory.values))
        return context, probs
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    lead = queries.shape[:-1]
    l = memory.size
    q = T.reshape(queries, lead + (n_heads, dh))
    q = T.transpose(q, tuple(range(len(lead) - 1)) + (len(lead), len(lead) - 1, len(lead) + 1))
    k = T.reshape(memory.keys, (n_heads, dh, l))
    v = T.transpose(T.reshape(memory.values, (n_heads, dh, l)), (0, 2, 1))
    probs_h = T.softmax(T.matmul(q, k) * (1.0 / math.sqrt(dh)), axis=-1)
    ctx = T.matmul(probs_h, v)
    back = tuple(range(len(lead) - 1)) + (len(lead), len(lead) - 1, len(lead) + 1)
    ctx = T.reshape(T.transpose(ctx, back), lead + (d,))
    probs = T.mean(probs_h, axis=len(lead) - 1)
    return ctx, probs


def make_attention_labels(
    lengths: Sequence[int],
    pairs: Sequence[ConstraintPair],
    memory_size: int,
    slots: Optional[Sequence[int]] = None,
) -> AttentionLabels:
    """Label each source token with the 1-based slot of the constraint covering it.

    ``pairs[i]`` lives in slot ``slots[i]`` (default ``i + 1``); tokens no
    constraint covers get ``memory_size`` (the none slot). Overlapping
    constraints inside one sentence are rejected.
    """
    if slots is None:
        slots = [i + 1 for i in range(len(pairs))]
    per_sentence = [np.full(n, memory_size, dtype=np.int64) for n in lengths]
    covered = [np.zeros(n, dtype=bool) for n in lengths]
    for pair, slot in zip(pairs, slots):
        if not 1 <= slot < memory_size:
            raise ConstraintError(f"slot {slot} outside constraint slots 1..{memory_size - 1}")
        if pair.source_span is None:
            continue
        if not 0 <= pair.origin < len(lengths):
            raise ConstraintError(f"constraint origin {pair.origin} not in batch")
        a, b = pair.source_span
        if not 0 <= a < b <= lengths[pair.origin]:
            raise ConstraintError(f"span {pair.source_span} outside sentence {pair.origin}")
        if covered[pair.origin][a:b].any():
            raise ConstraintError(f"overlapping constraints in sentence {pair.origin}")
        covered[pair.origin][a:b] = True
        per_sentence[pair.origin][a:b] = slot
    flat = np.concatenate(per_sentence) if per_sentence else np.zeros(0, dtype=np.int64)
    return AttentionLabels(flat, tuple(int(n) for n in lengths), memory_size)


def attention_loss(probs: Tensor, labels: AttentionLabels) -> Tensor:
    """Mean of ``-log p[j, s_j]`` over all labelled tokens (log clamped at 1e-9)."""
    if probs.ndim != 2:
        raise ShapeError(f"attention_loss expects (N, l) probs, got {probs.shape}")
    if probs.shape[0] != len(labels.slots):
        raise ShapeError(f"{probs.shape[0]} prob rows for {len(labels.slots)} labels")
    picked = T.take_last(probs, labels.zero_based())
    return T.mean(-T.log(picked, eps=LOG_EPS))
