"""Teacher-forced training: batching, joint loss, Adam with warmup and clipping."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import NonFiniteError, TrainingError
from .memory import AttentionLabels, ConstraintPair, attention_loss, build_memory, make_attention_labels
from .model import PAD, ModelConfig, Params, decode_batch, encode_batch, pad_batch, teacher_forcing
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)


@dataclass
class Example:
    """One numericalised sentence pair; ``tgt`` ends with EOS.

    ``constraints`` holds ConstraintPair objects whose ``origin`` is ignored
    (it is rewritten when the example joins a batch).
    """

    src: list
    tgt: list
    constraints: list = field(default_factory=list)


@dataclass
class TrainBatch:
    src: np.ndarray
    lengths: list
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    pairs: list
    labels: Optional[AttentionLabels]


def merge_duplicates(pairs: Sequence[ConstraintPair]):
    """Collapse pairs with identical phrases into one slot.

    Returns ``(unique_pairs, slot_of_pair)`` with 1-based slots.
    """
    index: dict = {}
    unique, slots = [], []
    for p in pairs:
        if p.key not in index:
            index[p.key] = len(unique) + 1
            unique.append(p)
        slots.append(index[p.key])
    return unique, slots


def make_batch(examples: Sequence[Example], use_memory: bool, dropped: Sequence[bool] = ()) -> TrainBatch:
    """Pad a list of examples and, for memory models, gather the batch-shared constraints.

    ``dropped[i]`` removes every constraint of example ``i`` (constraint dropout).
    """
    lengths = [len(e.src) for e in examples]
    src = pad_batch([e.src for e in examples])
    tgt_in, tgt_out = teacher_forcing([e.tgt for e in examples])
    pairs, labels = [], None
    if use_memory:
        located = []
        for i, e in enumerate(examples):
            if i < len(dropped) and dropped[i]:
                continue
            for c in e.constraints:
                located.append(ConstraintPair(c.source, c.target, i, c.source_span, c.target_span))
        pairs, slots = merge_duplicates(located)
        labels = make_attention_labels(lengths, located, len(pairs) + 1, slots)
    return TrainBatch(src, lengths, tgt_in, tgt_out, pairs, labels)


def _token_rows(lengths: Sequence[int], width: int) -> np.ndarray:
    return np.concatenate([b * width + np.arange(n) for b, n in enumerate(lengths)])


def batch_losses(params: Params, config: ModelConfig, batch: TrainBatch, per_sentence: bool = False):
    """Forward pass returning ``(main_loss, att_loss)``; att_loss is None without memory.

    With ``per_sentence=True`` the main loss is a (B,) tensor of mean token
    losses per sentence instead of the batch token mean.
    """
    memory = build_memory(batch.pairs, params) if config.has_memory else None
    hidden, probs, valid = encode_batch(params, config, batch.src, batch.lengths, memory)
    logits = decode_batch(params, config, hidden, valid, batch.tgt_in)
    flat = T.reshape(logits, (-1, logits.shape[-1]))
    targets = batch.tgt_out.reshape(-1)
    if per_sentence:
        rows = T.cross_entropy(flat, targets, ignore_index=PAD, reduction="none")
        counts = (batch.tgt_out != PAD).sum(axis=1)
        main = T.reshape(rows, batch.tgt_out.shape).sum(axis=1) / counts.astype(rows.dtype)
    else:
        main = T.cross_entropy(flat, targets, ignore_index=PAD)
    att = None
    if memory is not None and batch.labels is not None:
        rows = T.embedding(T.reshape(probs, (-1, probs.shape[-1])), _token_rows(batch.lengths, probs.shape[1]))
        att = attention_loss(rows, batch.labels)
    return main, att


def total_loss(config: ModelConfig, main, att):
    if att is None or config.lambda_att == 0:
        return main
    return main + att * config.lambda_att


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup: int = 100
    clip_norm: float = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, self.step / self.warmup)


def clip_gradients(params: Params, max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


def adam_update(params: Params, state: AdamState) -> None:
    state.step += 1
    lr = state.learning_rate()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        if p.grad is None or not p.requires_grad:
            continue
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)


def zero_grad(params: Params) -> None:
    for p in params.values():
        p.grad = None


def train_step(params: Params, config: ModelConfig, batch: TrainBatch, state: AdamState):
    """One optimiser update on ``main + lambda_att * att``; returns the two losses as floats."""
    zero_grad(params)
    try:
        main, att = batch_losses(params, config, batch)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite forward value at step {state.step + 1}: {exc}") from exc
    main_v = main.item()
    att_v = att.item() if att is not None else 0.0
    if not (math.isfinite(main_v) and math.isfinite(att_v)):
        raise TrainingError(
            f"non-finite loss at step {state.step + 1}: main={main_v} att={att_v} lr={state.learning_rate()}"
        )
    total_loss(config, main, att).backward()
    clip_gradients(params, state.clip_norm)
    adam_update(params, state)
    return main_v, att_v


class ConflictFreeSampler:
    """Draws batches whose shared memory never maps one source phrase to two targets.

    Examples are visited in seeded shuffled epochs; an example whose
    constraints clash with those already in the batch is deferred to a later
    batch rather than discarded.
    """

    def __init__(self, examples: Sequence[Example], batch_size: int, seed: int, use_memory: bool = True):
        self.examples = examples
        self.batch_size = batch_size
        self.use_memory = use_memory
        self.rng = SplitMix64(derive_seed(seed, "batches"))
        self.queue: deque = deque()

    def _refill(self) -> None:
        self.queue.extend(self.rng.permutation(len(self.examples)))

    def next_indices(self) -> list:
        if len(self.queue) < 2 * self.batch_size:
            self._refill()
        chosen, deferred, seen = [], [], {}
        scanned = 0
        limit = len(self.queue)
        while self.queue and len(chosen) < self.batch_size and scanned < limit:
            i = self.queue.popleft()
            scanned += 1
            ok = True
            if self.use_memory:
                for c in self.examples[i].constraints:
                    if seen.get(c.source, c.target) != c.target:
                        ok = False
                        break
            if ok:
                chosen.append(i)
                if self.use_memory:
                    for c in self.examples[i].constraints:
                        seen[c.source] = c.target
            else:
                deferred.append(i)
        self.queue.extendleft(reversed(deferred))
        return chosen


def train(
    params: Params,
    config: ModelConfig,
    examples: Sequence[Example],
    steps: int,
    batch_size: int = 32,
    seed: int = 0,
    state: Optional[AdamState] = None,
    p_drop: float = 0.0,
    callback: Optional[Callable[[dict], None]] = None,
) -> list:
    """Run ``steps`` updates; returns a list of per-step log records."""
    state = state or AdamState()
    sampler = ConflictFreeSampler(examples, batch_size, seed, use_memory=config.has_memory)
    drop_rng = SplitMix64(derive_seed(seed, "constraint-dropout"))
    history = []
    for _ in range(steps):
        idx = sampler.next_indices()
        dropped = [drop_rng.random() < p_drop for _ in idx] if p_drop > 0 else []
        batch = make_batch([examples[i] for i in idx], config.has_memory, dropped)
        main, att = train_step(params, config, batch, state)
        record = {"step": state.step, "main_loss": main, "att_loss": att, "lr": state.learning_rate()}
        history.append(record)
        if callback is not None:
            callback(record)
    return history
