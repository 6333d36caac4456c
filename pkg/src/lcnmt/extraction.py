"""Constraint extraction from word alignments filtered by parse spans."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .memory import ConstraintPair
from .rng import SplitMix64


@dataclass(frozen=True, order=True)
class PhrasePairCandidate:
    source_span: tuple
    target_span: tuple

    @property
    def source_len(self) -> int:
        return self.source_span[1] - self.source_span[0]

    @property
    def target_len(self) -> int:
        return self.target_span[1] - self.target_span[0]


def extract_consistent_phrases(
    alignment: Iterable, src_len: int, tgt_len: int, max_phrase_len: int = 4
) -> set:
    """All strictly consistent phrase pairs up to ``max_phrase_len`` on each side.

    A pair of spans is kept when every token on both sides is aligned, and
    every link touching either span stays inside the rectangle. Under that
    rule the source span fixes the target span, so one pass over source
    spans suffices.
    """
    by_src = [[] for _ in range(src_len)]
    by_tgt = [[] for _ in range(tgt_len)]
    for i, j in set(alignment):
        if not (0 <= i < src_len and 0 <= j < tgt_len):
            raise ValueError(f"link {i}-{j} outside {src_len}x{tgt_len}")
        by_src[i].append(j)
        by_tgt[j].append(i)
    out = set()
    for a in range(src_len):
        lo, hi = math.inf, -1
        for b in range(a + 1, min(src_len, a + max_phrase_len) + 1):
            if not by_src[b - 1]:
                break  # every longer span contains this unaligned token
            lo = min(lo, min(by_src[b - 1]))
            hi = max(hi, max(by_src[b - 1]))
            c, d = lo, hi + 1
            if d - c > max_phrase_len:
                continue
            if all(by_tgt[j] and all(a <= i < b for i in by_tgt[j]) for j in range(c, d)):
                out.add(PhrasePairCandidate((a, b), (c, d)))
    return out


def filter_by_parse_spans(candidates: Iterable[PhrasePairCandidate], src_spans, tgt_spans) -> set:
    """Keep candidates whose source and target spans both appear among the parse spans."""
    src_ok = {tuple(s) for s in src_spans}
    tgt_ok = {tuple(s) for s in tgt_spans}
    return {c for c in candidates if c.source_span in src_ok and c.target_span in tgt_ok}


def _overlaps(x: tuple, y: tuple) -> bool:
    return x[0] < y[1] and y[0] < x[1]


def resolve_overlaps(candidates: Iterable[PhrasePairCandidate]) -> list:
    """Greedy selection: longest source span first, then leftmost; drop anything overlapping a kept pair."""
    kept = []
    for cand in sorted(candidates, key=lambda c: (-c.source_len, c.source_span[0], c.target_span)):
        if any(_overlaps(cand.source_span, k.source_span) or _overlaps(cand.target_span, k.target_span) for k in kept):
            continue
        kept.append(cand)
    return sorted(kept)


def extract_constraints(
    src: Sequence,
    tgt: Sequence,
    alignment: Optional[Iterable],
    src_spans: Optional[Iterable],
    tgt_spans: Optional[Iterable],
    max_phrase_len: int = 4,
    min_phrase_len: int = 1,
    origin: int = 0,
) -> list:
    """Alignment phrases -> parse filter -> length filter -> overlap resolution -> ConstraintPairs.

    Missing alignment or span annotations yield an empty list.
    """
    if not alignment or src_spans is None or tgt_spans is None:
        return []
    cands = extract_consistent_phrases(alignment, len(src), len(tgt), max_phrase_len)
    cands = filter_by_parse_spans(cands, src_spans, tgt_spans)
    cands = [c for c in cands if c.source_len >= min_phrase_len]
    return [
        ConstraintPair(
            tuple(src[c.source_span[0] : c.source_span[1]]),
            tuple(tgt[c.target_span[0] : c.target_span[1]]),
            origin,
            c.source_span,
            c.target_span,
        )
        for c in resolve_overlaps(cands)
    ]


def sample_count(ratio: float, count: int) -> int:
    """``round(ratio * count)`` with halves rounded up."""
    return int(math.floor(ratio * count + 0.5))


def sample_constraints(constraints: Sequence, ratio: float, seed: int) -> list:
    """Uniform sample without replacement of ``round(ratio * n)`` items, in original order."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    k = sample_count(ratio, len(constraints))
    return SplitMix64(seed).sample(list(constraints), k)
