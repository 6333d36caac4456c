"""Corpus records, JSONL I/O, vocabularies and the synthetic homograph task."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import ConfigError, FormatError
from .memory import ConstraintPair
from .model import BOS, EOS, PAD, UNK
from .rng import SplitMix64, derive_seed

KNOWN_FIELDS = ("id", "src", "tgt", "alignment", "src_spans", "tgt_spans", "constraints")


# ---------------------------------------------------------------- records


@dataclass
class CorpusRecord:
    """One tokenised sentence pair with optional alignment, parse spans and constraints.

    ``constraints`` entries are dicts with ``src_tokens``/``tgt_tokens`` and,
    when the phrase location is known, ``src_span``/``tgt_span`` (half-open).
    Fields this module does not know about are kept in ``extra``.
    """

    id: object
    src: list
    tgt: list
    alignment: Optional[list] = None
    src_spans: Optional[list] = None
    tgt_spans: Optional[list] = None
    constraints: Optional[list] = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        m, n = len(self.src), len(self.tgt)
        for i, j in self.alignment or ():
            if not (0 <= i < m and 0 <= j < n):
                raise FormatError(f"alignment link {i}-{j} outside {m}x{n} sentence")
        for spans, size, side in ((self.src_spans, m, "source"), (self.tgt_spans, n, "target")):
            for a, b in spans or ():
                if not 0 <= a < b <= size:
                    raise FormatError(f"{side} span [{a},{b}) outside sentence of length {size}")
        for c in self.constraints or ():
            if not c.get("src_tokens") or not c.get("tgt_tokens"):
                raise FormatError("constraint phrases must be nonempty")
            if "src_span" in c:
                a, b = c["src_span"]
                if not 0 <= a < b <= m or self.src[a:b] != c["src_tokens"]:
                    raise FormatError(f"constraint source span {c['src_span']} does not match the sentence")
            if "tgt_span" in c:
                a, b = c["tgt_span"]
                if not 0 <= a < b <= n or self.tgt[a:b] != c["tgt_tokens"]:
                    raise FormatError(f"constraint target span {c['tgt_span']} does not match the sentence")

    def to_json(self) -> dict:
        out = {"id": self.id, "src": list(self.src), "tgt": list(self.tgt)}
        if self.alignment is not None:
            out["alignment"] = format_alignment(self.alignment)
        if self.src_spans is not None:
            out["src_spans"] = [list(s) for s in self.src_spans]
        if self.tgt_spans is not None:
            out["tgt_spans"] = [list(s) for s in self.tgt_spans]
        if self.constraints is not None:
            out["constraints"] = [_constraint_json(c) for c in self.constraints]
        out.update(self.extra)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusRecord":
        if not isinstance(obj, dict):
            raise FormatError("record must be a JSON object")
        for key in ("id", "src", "tgt"):
            if key not in obj:
                raise FormatError(f"record missing {key!r}")
        src = _tokens(obj["src"])
        tgt = _tokens(obj["tgt"])
        alignment = parse_alignment(obj["alignment"]) if obj.get("alignment") is not None else None
        src_spans = _spans(obj.get("src_spans"))
        tgt_spans = _spans(obj.get("tgt_spans"))
        constraints = None
        if obj.get("constraints") is not None:
            constraints = [_parse_constraint(c, src, tgt) for c in obj["constraints"]]
        extra = {k: v for k, v in obj.items() if k not in KNOWN_FIELDS}
        rec = cls(obj["id"], src, tgt, alignment, src_spans, tgt_spans, constraints, extra)
        rec.validate()
        return rec


def _tokens(value) -> list:
    if isinstance(value, str):
        return value.split()
    if isinstance(value, list) and all(isinstance(t, str) for t in value):
        return list(value)
    raise FormatError("tokens must be a string or a list of strings")


def _spans(value) -> Optional[list]:
    if value is None:
        return None
    try:
        return sorted({(int(a), int(b)) for a, b in value})
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad span list: {value!r}") from exc


def _parse_constraint(c: dict, src: list, tgt: list) -> dict:
    if not isinstance(c, dict):
        raise FormatError("constraint must be an object")
    out = {}
    if "src_span" in c:
        a, b = (int(x) for x in c["src_span"])
        out["src_span"] = (a, b)
        out["src_tokens"] = list(c.get("src_tokens") or src[a:b])
    else:
        out["src_tokens"] = _tokens(c.get("src_tokens", []))
    if "tgt_span" in c:
        a, b = (int(x) for x in c["tgt_span"])
        out["tgt_span"] = (a, b)
        out["tgt_tokens"] = list(c.get("tgt_tokens") or tgt[a:b])
    else:
        out["tgt_tokens"] = _tokens(c.get("tgt_tokens", []))
    return out


def _constraint_json(c: dict) -> dict:
    out = {}
    if "src_span" in c:
        out["src_span"] = list(c["src_span"])
    if "tgt_span" in c:
        out["tgt_span"] = list(c["tgt_span"])
    out["src_tokens"] = list(c["src_tokens"])
    out["tgt_tokens"] = list(c["tgt_tokens"])
    return out


def parse_alignment(value) -> list:
    """Links from a Pharaoh string (``"0-0 1-1"``) or a list of ``[i, j]`` pairs, sorted and deduplicated."""
    try:
        if isinstance(value, str):
            links = [tuple(int(x) for x in item.split("-")) for item in value.split()]
        else:
            links = [(int(i), int(j)) for i, j in value]
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad alignment: {value!r}") from exc
    if any(len(link) != 2 for link in links):
        raise FormatError(f"bad alignment: {value!r}")
    return sorted(set(links))


def format_alignment(links: Iterable) -> str:
    return " ".join(f"{i}-{j}" for i, j in sorted(links))


def read_corpus(path) -> list:
    """Read a JSONL corpus; a malformed line raises FormatError naming its line number."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(CorpusRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, FormatError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_corpus(records: Iterable[CorpusRecord], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=False) + "\n")


# ---------------------------------------------------------------- vocabulary


class Vocab:
    """Token <-> index bijection with PAD=0, BOS=1, EOS=2, UNK=3."""

    SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != self.SPECIALS:
            raise ConfigError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary has duplicate tokens")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> "Vocab":
        """Most frequent first, ties broken alphabetically."""
        counts = Counter(t for s in sentences for t in s)
        for special in cls.SPECIALS:
            counts.pop(special, None)
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(list(cls.SPECIALS) + ordered)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list:
        out = []
        for i in ids:
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- numericalisation


def record_pairs(rec: CorpusRecord, src_vocab: Vocab, tgt_vocab: Vocab, constraints=None) -> list:
    """ConstraintPair objects for a record's constraints (or the given subset)."""
    if constraints is None:
        constraints = rec.constraints or []
    out = []
    for c in constraints:
        out.append(
            ConstraintPair(
                src_vocab.encode(c["src_tokens"]),
                tgt_vocab.encode(c["tgt_tokens"]),
                0,
                c.get("src_span"),
                c.get("tgt_span"),
            )
        )
    return out


# ---------------------------------------------------------------- synthetic homograph task


@dataclass
class HomographLexicon:
    translations: dict  # source token -> tuple of target tokens (len 1 or 2)
    homographs: tuple

    @property
    def source_tokens(self) -> list:
        return sorted(self.translations, key=lambda t: int(t[1:]))


def make_lexicon(seed: int, src_vocab: int, homograph_count: int) -> HomographLexicon:
    if homograph_count < 0:
        raise ConfigError("homograph_count must be >= 0")
    if src_vocab <= homograph_count:
        raise ConfigError(f"source vocabulary of {src_vocab} is too small for {homograph_count} homographs")
    rng = SplitMix64(derive_seed(seed, "lexicon"))
    perm = rng.permutation(src_vocab)
    homograph_ids = set(rng.sample(list(range(src_vocab)), homograph_count))
    translations = {}
    for i in range(src_vocab):
        t = f"t{perm[i]}"
        translations[f"s{i}"] = (f"{t}a", f"{t}b") if i in homograph_ids else (t,)
    homographs = tuple(f"s{i}" for i in sorted(homograph_ids))
    return HomographLexicon(translations, homographs)


def _homograph_sentence(rng: SplitMix64, lex: HomographLexicon, sid, min_len, max_len, rate, bigram_rate):
    length = rng.integers(min_len, max_len + 1)
    regular = [t for t in lex.source_tokens if t not in lex.homographs]
    unused = list(lex.homographs)
    src, tgt, homograph_positions = [], [], []
    for j in range(length):
        if unused and rng.random() < rate:
            tok = unused.pop(rng.integers(0, len(unused)))
            sense = rng.integers(0, 2)
            src.append(tok)
            tgt.append(lex.translations[tok][sense])
            homograph_positions.append(j)
        else:
            tok = regular[rng.integers(0, len(regular))]
            src.append(tok)
            tgt.append(lex.translations[tok][0])
    spans = {(j, j + 1) for j in homograph_positions}
    spans |= {(j, j + 2) for j in range(length - 1) if rng.random() < bigram_rate}
    spans = sorted(spans)
    constraints = [
        {"src_span": (j, j + 1), "tgt_span": (j, j + 1), "src_tokens": [src[j]], "tgt_tokens": [tgt[j]]}
        for j in homograph_positions
    ]
    return CorpusRecord(
        id=sid,
        src=src,
        tgt=tgt,
        alignment=[(j, j) for j in range(length)],
        src_spans=list(spans),
        tgt_spans=list(spans),
        constraints=constraints,
        extra={"homographs": homograph_positions},
    )


def generate_homograph_corpus(
    seed: int,
    n_sentences: int,
    n_dev: Optional[int] = None,
    n_test: Optional[int] = None,
    src_vocab: int = 60,
    homograph_count: int = 4,
    min_len: int = 4,
    max_len: int = 8,
    homograph_rate: float = 0.2,
    bigram_span_rate: float = 0.3,
) -> dict:
    """Deterministic word-for-word translation task with ambiguous source tokens.

    Every regular source token has one translation. Each homograph has two,
    picked uniformly per occurrence, and appears at most once per sentence, so
    without its constraint the right sense cannot be predicted. Records carry
    identity alignments, parse spans (homograph unigrams plus random bigrams,
    mirrored on both sides) and one gold constraint per homograph. Returns
    ``{"train", "dev", "test"}`` record lists; dev/test default to
    ``n_sentences // 10``.
    """
    if not 1 <= min_len <= max_len:
        raise ConfigError("need 1 <= min_len <= max_len")
    lex = make_lexicon(seed, src_vocab, homograph_count)
    sizes = {
        "train": n_sentences,
        "dev": n_sentences // 10 if n_dev is None else n_dev,
        "test": n_sentences // 10 if n_test is None else n_test,
    }
    out = {}
    for split, n in sizes.items():
        rng = SplitMix64(derive_seed(seed, "split", split))
        out[split] = [
            _homograph_sentence(rng, lex, f"{split}-{i}", min_len, max_len, homograph_rate, bigram_span_rate)
            for i in range(n)
        ]
    return out


def homograph_lexicon_json(seed: int, src_vocab: int, homograph_count: int) -> dict:
    lex = make_lexicon(seed, src_vocab, homograph_count)
    return {"homographs": list(lex.homographs), "translations": {k: list(v) for k, v in lex.translations.items()}}
