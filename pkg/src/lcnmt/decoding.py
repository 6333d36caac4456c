"""Greedy, beam and dynamic-beam-allocation (DBA) decoding.

All searches talk to the model through a *scorer*: a callable mapping a list
of equal-length prefixes (each starting with BOS) to an array of next-token
log-probabilities. :class:`lcnmt.model.StepScorer` is the model-backed one;
tests plug in synthetic scorers.

Ties are broken by lower token index, then by lower beam position, which
makes every search bitwise reproducible.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .evaluation import contains
from .data import record_pairs
from .extraction import sample_constraints
from .memory import build_memory
from .model import BOS, EOS, PAD, UNK, ModelConfig, Params, StepScorer, encode, encode_with_memory

log = logging.getLogger(__name__)

BANNED = (PAD, BOS, UNK)
Scorer = Callable[[Sequence[Sequence[int]]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list
    score: float = 0.0
    finished: bool = False
    forced: bool = False
    constraint_state: Optional["ConstraintState"] = None

    @property
    def output(self) -> list:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)

    @property
    def met(self) -> int:
        return 0 if self.constraint_state is None else self.constraint_state.met_tokens

    @property
    def satisfied(self) -> bool:
        return self.constraint_state is None or self.constraint_state.all_met

    def normalized(self, alpha: float) -> float:
        return self.score / max(len(self.tokens), 1) ** alpha


def _rank_key(alpha: float):
    return lambda h: (-h.normalized(alpha), tuple(h.tokens))


def _mask(logp: np.ndarray, banned: Sequence[int]) -> np.ndarray:
    logp = logp.copy()
    logp[:, list(banned)] = -np.inf
    return logp


def greedy_decode(scorer: Scorer, max_len: int, banned: Sequence[int] = BANNED) -> Hypothesis:
    """Argmax chain; stops at EOS or after ``max_len`` tokens (then flagged ``forced``)."""
    hyp = Hypothesis([])
    for _ in range(max_len):
        logp = _mask(scorer([[BOS] + hyp.tokens]), banned)[0]
        tok = int(np.argmax(logp))
        hyp.tokens.append(tok)
        hyp.score += float(logp[tok])
        if tok == EOS:
            hyp.finished = True
            return hyp
    hyp.finished = hyp.forced = True
    return hyp


def beam_search(
    scorer: Scorer,
    k: int,
    max_len: int,
    alpha: float = 0.6,
    banned: Sequence[int] = BANNED,
) -> list:
    """Standard beam search; returns finished hypotheses best-first by ``score / len**alpha``.

    Each step ranks all (beam item x token) extensions. EOS extensions that
    make the overall top ``k`` are finished; the best ``k`` non-EOS
    extensions stay alive. Search stops once ``k`` hypotheses have finished
    or after ``max_len`` tokens, when survivors are force-finished.
    """
    if k < 1:
        raise ValueError("beam size must be >= 1")
    alive = [Hypothesis([])]
    finished: list = []
    for step in range(1, max_len + 1):
        logp = _mask(scorer([[BOS] + h.tokens for h in alive]), banned)
        scores = np.array([h.score for h in alive])[:, None] + logp
        beam_idx, tok = np.nonzero(np.isfinite(scores))
        cand = scores[beam_idx, tok]
        order = np.lexsort((beam_idx, tok, -cand))
        beam_idx, tok, cand = beam_idx[order], tok[order], cand[order]
        for b, t, s in zip(beam_idx[:k], tok[:k], cand[:k]):
            if t == EOS:
                finished.append(Hypothesis(alive[b].tokens + [EOS], float(s), True))
        nxt = []
        for b, t, s in zip(beam_idx, tok, cand):
            if t != EOS:
                nxt.append(Hypothesis(alive[b].tokens + [int(t)], float(s)))
                if len(nxt) == k:
                    break
        alive = nxt
        if step == max_len:
            for h in alive:
                h.finished = h.forced = True
            finished.extend(alive)
            alive = []
        if len(finished) >= k or not alive:
            break
    return sorted(finished, key=_rank_key(alpha))


# ---------------------------------------------------------------- DBA


@dataclass(frozen=True)
class ConstraintState:
    """Progress through a set of target-side token constraints.

    ``met`` flags completed constraints; ``current`` is ``(index, position)``
    of a partially generated multi-token constraint. A token that breaks a
    partial match un-counts it and may itself start a new constraint.
    """

    constraints: tuple
    met: tuple
    current: Optional[tuple] = None

    @classmethod
    def start(cls, constraints: Sequence[Sequence[int]]) -> "ConstraintState":
        cons = tuple(tuple(c) for c in constraints)
        return cls(cons, (False,) * len(cons))

    @property
    def total_tokens(self) -> int:
        return sum(len(c) for c in self.constraints)

    @property
    def met_tokens(self) -> int:
        done = sum(len(c) for c, m in zip(self.constraints, self.met) if m)
        return done + (self.current[1] if self.current else 0)

    @property
    def all_met(self) -> bool:
        return all(self.met)

    def next_tokens(self) -> list:
        """Tokens that would advance constraint progress."""
        if self.current is not None:
            c, pos = self.current
            return [self.constraints[c][pos]]
        return sorted({c[0] for c, m in zip(self.constraints, self.met) if not m})

    def advance(self, token: int) -> "ConstraintState":
        if self.current is not None:
            c, pos = self.current
            if self.constraints[c][pos] == token:
                if pos + 1 == len(self.constraints[c]):
                    met = self.met[:c] + (True,) + self.met[c + 1 :]
                    return ConstraintState(self.constraints, met, None)
                return ConstraintState(self.constraints, self.met, (c, pos + 1))
        for i, (cons, m) in enumerate(zip(self.constraints, self.met)):
            if not m and cons[0] == token:
                if len(cons) == 1:
                    met = self.met[:i] + (True,) + self.met[i + 1 :]
                    return ConstraintState(self.constraints, met, None)
                return ConstraintState(self.constraints, self.met, (i, 1))
        if self.current is None:
            return self
        return ConstraintState(self.constraints, self.met, None)


def allocate_banks(bank_sizes: Sequence[int], k: int) -> list:
    """Slots per bank: ``k // n_banks`` each, with leftover and unused slots going to the most-progressed banks."""
    n = len(bank_sizes)
    base = k // n
    alloc = [min(base, size) for size in bank_sizes]
    spare = k - sum(alloc)
    for j in reversed(range(n)):
        extra = min(spare, bank_sizes[j] - alloc[j])
        alloc[j] += extra
        spare -= extra
    return alloc


def dba_decode(
    scorer: Scorer,
    k: int,
    constraints: Sequence[Sequence[int]],
    max_len: int,
    alpha: float = 0.6,
    banned: Sequence[int] = BANNED,
) -> list:
    """Lexically constrained beam search with dynamic beam allocation.

    Candidates per step are each item's top-``k`` non-EOS tokens, EOS, and
    the tokens that advance its constraints. They are grouped into banks by the number of
    constraint tokens met and the ``k`` beam slots are shared out by
    :func:`allocate_banks`. EOS is only allowed once every constraint is met.
    The model is queried once per step for the alive beam, whatever the
    number of constraints. Results list hypotheses meeting all constraints
    first, then by normalised score.
    """
    if k < 1:
        raise ValueError("beam size must be >= 1")
    start = ConstraintState.start(constraints)
    n_banks = start.total_tokens + 1
    alive = [Hypothesis([], 0.0, constraint_state=start)]
    finished: list = []
    for step in range(1, max_len + 1):
        logp = _mask(scorer([[BOS] + h.tokens for h in alive]), banned)
        for i, h in enumerate(alive):
            if not h.constraint_state.all_met:
                logp[i, EOS] = -np.inf
        cands = {}
        for i, h in enumerate(alive):
            row = logp[i]
            finite = np.nonzero(np.isfinite(row))[0]
            finite = finite[finite != EOS]
            top = finite[np.lexsort((finite, -row[finite]))][:k]
            extra = [t for t in h.constraint_state.next_tokens() + [EOS] if np.isfinite(row[t])]
            for t in list(top) + extra:
                cands[(i, int(t))] = h.score + float(row[t])
        banks = [[] for _ in range(n_banks)]
        for (i, t), s in cands.items():
            state = alive[i].constraint_state.advance(t)
            banks[state.met_tokens].append((-s, t, i, state))
        for bank in banks:
            bank.sort(key=lambda e: e[:3])
        # finished: EOS candidates that rank within the top k of the all-met bank
        for neg_s, t, i, state in banks[-1][:k]:
            if t == EOS:
                finished.append(Hypothesis(alive[i].tokens + [EOS], -neg_s, True, constraint_state=state))
        open_banks = [[e for e in bank if e[1] != EOS] for bank in banks]
        alloc = allocate_banks([len(b) for b in open_banks], k)
        chosen = [e for bank, n in zip(open_banks, alloc) for e in bank[:n]]
        chosen.sort(key=lambda e: (-e[3].met_tokens,) + e[:3])
        alive = [Hypothesis(alive[i].tokens + [t], -neg_s, constraint_state=state) for neg_s, t, i, state in chosen]
        if step == max_len:
            for h in alive:
                h.finished = h.forced = True
            finished.extend(alive)
            alive = []
        if len(finished) >= k or not alive:
            break
    ranked = sorted(finished, key=lambda h: (not h.satisfied,) + _rank_key(alpha)(h))
    if ranked and not ranked[0].satisfied:
        log.warning("no hypothesis within max_len=%d satisfies every constraint", max_len)
    return ranked


# ---------------------------------------------------------------- corpus decoding


MODES = ("base", "dba", "lcnmt")


def pick_constraints(records: Sequence, ratio: float, seed: int) -> list:
    """Per-record subsets of constraints, sampled at ``ratio`` over the whole corpus pool."""
    pool = [(r, c) for r, rec in enumerate(records) for c in range(len(rec.constraints or []))]
    chosen = sample_constraints(pool, ratio, seed)
    out = [[] for _ in records]
    for r, c in chosen:
        out[r].append(records[r].constraints[c])
    return out


def decode_corpus(
    params: Params,
    config: ModelConfig,
    records: Sequence,
    src_vocab,
    tgt_vocab,
    mode: str = "base",
    k: int = 12,
    ratio: float = 0.0,
    seed: int = 0,
    alpha: float = 0.6,
    extra_len: int = 10,
    threads: int = 1,
) -> list:
    """Decode every record; returns one result dict per sentence in corpus order.

    ``base`` encodes and runs beam search, ``dba`` adds target-side
    constraints to the search, ``lcnmt`` builds a per-sentence memory from
    the (source, target) constraint pairs and runs plain beam search.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "lcnmt" and not config.has_memory:
        raise ConfigError("lcnmt decoding needs a checkpoint trained with a memory sublayer")
    if mode != "lcnmt" and config.has_memory:
        raise ConfigError(f"{mode} decoding needs a checkpoint without a memory sublayer")
    given = pick_constraints(records, ratio, seed) if mode != "base" else [[] for _ in records]

    def run(i: int) -> dict:
        rec = records[i]
        src = src_vocab.encode(rec.src)
        max_len = min(len(src) + extra_len, config.max_len)
        cons = given[i]
        with T.no_grad():
            if mode == "lcnmt":
                memory = build_memory(record_pairs(rec, src_vocab, tgt_vocab, cons), params)
                enc = encode_with_memory(params, config, src, memory)
            else:
                enc = encode(params, config, src)
            scorer = StepScorer(params, config, enc)
            if mode == "dba":
                hyps = dba_decode(scorer, k, [tgt_vocab.encode(c["tgt_tokens"]) for c in cons], max_len, alpha)
            else:
                hyps = beam_search(scorer, k, max_len, alpha)
        best = hyps[0]
        tokens = tgt_vocab.decode(best.output)
        satisfied = sum(contains(tokens, c["tgt_tokens"]) for c in cons)
        return {
            "id": rec.id,
            "mode": mode,
            "tokens": tokens,
            "detok_text": " ".join(tokens),
            "score": best.score,
            "constraints_given": len(cons),
            "constraints_satisfied": satisfied,
            "forward_calls": scorer.forward_calls,
            "constraints": [list(c["tgt_tokens"]) for c in cons],
        }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, range(len(records))))
    return [run(i) for i in range(len(records))]
