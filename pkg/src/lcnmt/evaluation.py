"""Corpus BLEU, constraint satisfaction rate and corpus statistics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

from .errors import EvaluationError

MAX_ORDER = 4


@dataclass
class BleuReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_corpus(hypotheses: Sequence[Sequence], references: Sequence[Sequence], smooth: bool = True) -> BleuReport:
    """Token-level corpus BLEU-4 with clipped counts and brevity penalty.

    With ``smooth`` a zero match count at order n >= 2 becomes
    ``(0 + 1) / (total + 1)``; without it any zero precision gives 0.
    """
    if not hypotheses:
        raise EvaluationError("no hypotheses to score")
    if len(hypotheses) != len(references):
        raise EvaluationError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if ref_len == 0:
        raise EvaluationError("references are empty")
    precisions = []
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if m == 0 and smooth and n >= 2:
            precisions.append((m + 1) / (t + 1))
        else:
            precisions.append(m / t if t else 0.0)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len) if hyp_len else 0.0
    if min(precisions) == 0.0:
        return BleuReport(0.0, precisions, bp, hyp_len, ref_len)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(100.0 * score, precisions, bp, hyp_len, ref_len)


def contains(tokens: Sequence, phrase: Sequence) -> bool:
    """True when ``phrase`` occurs contiguously in ``tokens``."""
    n = len(phrase)
    phrase = list(phrase)
    return any(list(tokens[i : i + n]) == phrase for i in range(len(tokens) - n + 1))


def constraint_satisfaction_rate(hypotheses: Sequence[Sequence], constraints: Sequence[Sequence[Sequence]]) -> float:
    """Fraction of constraints found contiguously in their sentence's hypothesis.

    Returns 1.0 when there are no constraints at all.
    """
    total = hit = 0
    for hyp, cons in zip(hypotheses, constraints):
        for c in cons:
            total += 1
            hit += contains(hyp, c)
    return hit / total if total else 1.0


def homograph_accuracy(hypotheses: Sequence[Sequence], references: Sequence[Sequence], positions: Sequence[Sequence[int]]) -> float:
    """Share of homograph positions where the hypothesis token equals the reference token."""
    total = hit = 0
    for hyp, ref, pos in zip(hypotheses, references, positions):
        for j in pos:
            total += 1
            hit += j < len(hyp) and hyp[j] == ref[j]
    return hit / total if total else float("nan")


@dataclass
class CorpusStats:
    n_sentences: int
    n_phrases: int
    n_words_in_phrases: int
    n_subwords_in_phrases: int

    @property
    def avg_constraints_per_sentence(self) -> float:
        return self.n_subwords_in_phrases / self.n_sentences if self.n_sentences else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["avg_constraints_per_sentence"] = round(self.avg_constraints_per_sentence, 2)
        return d


def corpus_stats(records: Sequence, subword_fn: Optional[Callable[[str], list]] = None) -> CorpusStats:
    """Counts over the target side of every record's constraints.

    The average divides by all sentences, phrase-less ones included.
    """
    n_phrases = words = subwords = 0
    for rec in records:
        for c in rec.constraints or []:
            n_phrases += 1
            words += len(c["tgt_tokens"])
            subwords += sum(len(subword_fn(w)) for w in c["tgt_tokens"]) if subword_fn else len(c["tgt_tokens"])
    return CorpusStats(len(records), n_phrases, words, subwords)


# ---------------------------------------------------------------- tables


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).rjust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(header), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def format_ratio_table(results: dict, metric: str = "bleu") -> str:
    """Rows are ratios, columns methods; ``results[method][ratio]`` is a metrics dict."""
    methods = list(results)
    ratios = sorted({r for m in methods for r in results[m]})
    rows = []
    for r in ratios:
        row = [f"{int(round(r * 100))}%"]
        for m in methods:
            v = results[m].get(r, {}).get(metric)
            row.append("-" if v is None else f"{v:.2f}")
        rows.append(row)
    return _table(["ratio", *methods], rows)


def format_block_table(rows: Sequence[dict]) -> str:
    """One row per memory block: block, BLEU, CSR, final main loss."""
    body = [
        [str(r["block"]), f"{r['bleu']:.2f}", f"{r['csr']:.3f}", f"{r['main_loss']:.4f}"]
        for r in rows
    ]
    return _table(["block", "BLEU", "CSR", "main_loss"], body)
