"""Glue between corpora, training, decoding and scoring used by the CLI and experiments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .data import CorpusRecord, Vocab, record_pairs
from .decoding import decode_corpus
from .evaluation import bleu_corpus, constraint_satisfaction_rate, homograph_accuracy
from .model import EOS, ModelConfig, Params, init_params
from .training import AdamState, Example, train


def build_vocabs(records: Sequence[CorpusRecord]) -> tuple:
    return Vocab.build(r.src for r in records), Vocab.build(r.tgt for r in records)


def to_examples(records: Sequence[CorpusRecord], src_vocab: Vocab, tgt_vocab: Vocab) -> list:
    return [
        Example(src_vocab.encode(r.src), tgt_vocab.encode(r.tgt) + [EOS], record_pairs(r, src_vocab, tgt_vocab))
        for r in records
    ]


@dataclass
class TrainedModel:
    params: Params
    config: ModelConfig
    src_vocab: Vocab
    tgt_vocab: Vocab
    history: list
    seed: int


def train_model(
    records: Sequence[CorpusRecord],
    steps: int,
    memory_block: Optional[int],
    seed: int = 0,
    batch_size: int = 32,
    p_drop: float = 0.0,
    lr: float = 1e-3,
    warmup: int = 100,
    callback: Optional[Callable[[dict], None]] = None,
    **model_kw,
) -> TrainedModel:
    """Build vocabularies from ``records``, initialise and train a model."""
    src_vocab, tgt_vocab = build_vocabs(records)
    config = ModelConfig(len(src_vocab), len(tgt_vocab), memory_block=memory_block, **model_kw)
    params = init_params(config, seed)
    state = AdamState(lr=lr, warmup=warmup)
    history = train(
        params, config, to_examples(records, src_vocab, tgt_vocab), steps, batch_size, seed, state, p_drop, callback
    )
    return TrainedModel(params, config, src_vocab, tgt_vocab, history, seed)


def score_results(results: Sequence[dict], records: Sequence[CorpusRecord]) -> dict:
    """BLEU, CSR and (when records mark them) homograph accuracy for decode results."""
    by_id = {r.id: r for r in records}
    refs = [by_id[row["id"]].tgt for row in results]
    hyps = [row["tokens"] for row in results]
    report = {
        "bleu": bleu_corpus(hyps, refs).bleu,
        "csr": constraint_satisfaction_rate(hyps, [row.get("constraints", []) for row in results]),
        "n_sentences": len(results),
        "n_constraints": sum(row.get("constraints_given", 0) for row in results),
    }
    positions = [by_id[row["id"]].extra.get("homographs") for row in results]
    if all(p is not None for p in positions):
        report["homograph_accuracy"] = homograph_accuracy(hyps, refs, positions)
    return report


def run_decode(model: TrainedModel, records: Sequence[CorpusRecord], mode: str, **kw) -> list:
    return decode_corpus(model.params, model.config, records, model.src_vocab, model.tgt_vocab, mode, **kw)
