"""``lcnmt`` command line: synth, extract, train, decode, eval, sweep-blocks.

Every command writes into its ``--out`` directory, alongside its primary
outputs, a ``resolved_config.json`` (the merged config file, flags and seed)
and a ``manifest.json`` of sha256 digests. Exit codes: 0 success,
1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import statistics
import sys
from pathlib import Path
from typing import Optional, Sequence

import tomli

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Vocab, generate_homograph_corpus, homograph_lexicon_json, read_corpus, write_corpus
from .decoding import decode_corpus
from .errors import ConfigError, FormatError, LcnmtError
from .evaluation import (
    bleu_corpus,
    constraint_satisfaction_rate,
    corpus_stats,
    format_block_table,
    homograph_accuracy,
)
from .extraction import extract_constraints
from .pipeline import TrainedModel, score_results, train_model

log = logging.getLogger("lcnmt")

DEFAULTS = {
    "synth": {"seed": 0, "sentences": 5000, "dev": None, "test": None, "src_vocab": 60, "homographs": 4,
              "min_len": 4, "max_len": 8, "homograph_rate": 0.2, "bigram_span_rate": 0.3},
    "extract": {"max_phrase_len": 4, "min_phrase_len": 1},
    "model": {"d_model": 64, "n_blocks": 2, "n_heads": 4, "ffn_width": 128, "memory_block": 2,
              "memory_heads": 1, "lambda_att": 1.0, "max_len": 64},
    "train": {"mode": "lcnmt", "steps": 2000, "batch_size": 32, "lr": 1e-3, "warmup": 100, "p_drop": 0.0, "seed": 0},
    "decode": {"mode": "base", "beam": 12, "ratio": 1.0, "seed": 0, "alpha": 0.6, "extra_len": 10},
    "sweep": {"blocks": "1-6", "ratio": 0.5, "noise_seeds": 2},
}


# ---------------------------------------------------------------- config plumbing


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, values in cfg.items():
        bad = set(values) - set(DEFAULTS[section])
        if bad:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
    return cfg


def resolve(args: argparse.Namespace, sections: Sequence[str]) -> dict:
    """Defaults < config file < explicit flags, per section."""
    cfg = load_config(getattr(args, "config", None))
    out = {}
    for section in sections:
        merged = dict(DEFAULTS[section])
        merged.update(cfg.get(section, {}))
        for key in merged:
            flag = getattr(args, key, None)
            if flag is not None:
                merged[key] = flag
        out[section] = merged
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def finish_run(out: Path, command: str, resolved: dict) -> None:
    _dump({"command": command, **resolved}, out / "resolved_config.json")
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    _dump({"command": command, "files": {str(p.relative_to(out)): _sha256(p) for p in files}}, out / "manifest.json")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus_file(path: str, split: str) -> Path:
    p = Path(path)
    return p / f"{split}.jsonl" if p.is_dir() else p


def _threads(flag: Optional[int]) -> int:
    if flag:
        return flag
    env = os.environ.get("LCMT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"LCMT_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def _write_jsonl(rows, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{n}: {exc.msg}") from exc
    return rows


def parse_blocks(text: str) -> list:
    """``"1-6"`` or ``"1,2,4"`` -> list of ints."""
    out = []
    for part in str(text).split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _model_kw(model_cfg: dict) -> dict:
    return {k: v for k, v in model_cfg.items() if k != "memory_block"}


def _save_model(model: TrainedModel, path: Path, step: int) -> None:
    meta = {
        "step": step,
        "seed": model.seed,
        "src_vocab": model.src_vocab.itos,
        "tgt_vocab": model.tgt_vocab.itos,
        "src_vocab_sha256": model.src_vocab.digest(),
        "tgt_vocab_sha256": model.tgt_vocab.digest(),
    }
    save_checkpoint(path, model.params, model.config, meta)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    r = resolve(args, ["synth"])
    s = r["synth"]
    splits = generate_homograph_corpus(
        s["seed"], s["sentences"], s["dev"], s["test"], s["src_vocab"], s["homographs"],
        s["min_len"], s["max_len"], s["homograph_rate"], s["bigram_span_rate"],
    )
    out = _out_dir(args.out)
    for name, records in splits.items():
        write_corpus(records, out / f"{name}.jsonl")
    _dump(homograph_lexicon_json(s["seed"], s["src_vocab"], s["homographs"]), out / "lexicon.json")
    finish_run(out, "synth", r)
    log.info("wrote %s", ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return 0


def cmd_extract(args) -> int:
    r = resolve(args, ["extract"])
    e = r["extract"]
    records = read_corpus(args.input)
    missing = 0
    for rec in records:
        if not rec.alignment:
            missing += 1
        pairs = extract_constraints(
            rec.src, rec.tgt, rec.alignment, rec.src_spans, rec.tgt_spans, e["max_phrase_len"], e["min_phrase_len"]
        )
        rec.constraints = [
            {"src_span": p.source_span, "tgt_span": p.target_span,
             "src_tokens": list(p.source), "tgt_tokens": list(p.target)}
            for p in pairs
        ]
    if missing:
        log.warning("%d of %d records have no alignment; their constraint lists are empty", missing, len(records))
    out = _out_dir(args.out)
    write_corpus(records, out / "corpus.jsonl")
    stats = corpus_stats(records).to_dict()
    _dump(stats, out / "stats.json")
    print(json.dumps(stats, sort_keys=True))
    finish_run(out, "extract", {**r, "input": str(args.input)})
    return 0


def cmd_train(args) -> int:
    r = resolve(args, ["model", "train"])
    m, t = r["model"], r["train"]
    if t["mode"] not in ("base", "lcnmt"):
        raise ConfigError(f"--mode must be base or lcnmt, got {t['mode']!r}")
    if t["mode"] == "base":
        if args.memory_block is not None or args.lambda_att is not None:
            log.warning("--mode base ignores --memory-block and --lambda-att")
        m["memory_block"] = None
    records = read_corpus(_corpus_file(args.data, "train"))
    if not records:
        raise ConfigError("training corpus is empty")
    out = _out_dir(args.out)
    with open(out / "loss.jsonl", "w", encoding="utf-8") as fh:
        def cb(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["step"] % 100 == 0:
                log.info("step %d main %.4f att %.4f", rec["step"], rec["main_loss"], rec["att_loss"])

        model = train_model(
            records, t["steps"], m["memory_block"], t["seed"], t["batch_size"], t["p_drop"], t["lr"], t["warmup"],
            cb, **_model_kw(m),
        )
    _save_model(model, out / "model.ckpt", t["steps"])
    finish_run(out, "train", {**r, "data": str(args.data)})
    return 0


def _load_model(path: str, mode: str) -> TrainedModel:
    params, config, meta = load_checkpoint(path, expect_memory=(mode == "lcnmt"))
    src_vocab, tgt_vocab = Vocab(meta["src_vocab"]), Vocab(meta["tgt_vocab"])
    if src_vocab.digest() != meta["src_vocab_sha256"] or tgt_vocab.digest() != meta["tgt_vocab_sha256"]:
        raise FormatError("vocabulary hash mismatch in checkpoint metadata")
    return TrainedModel(params, config, src_vocab, tgt_vocab, [], meta.get("seed", 0))


def cmd_decode(args) -> int:
    r = resolve(args, ["decode"])
    d = r["decode"]
    model = _load_model(args.ckpt, d["mode"])
    records = read_corpus(_corpus_file(args.data, "test"))
    results = decode_corpus(
        model.params, model.config, records, model.src_vocab, model.tgt_vocab, d["mode"], d["beam"],
        d["ratio"], d["seed"], d["alpha"], d["extra_len"], _threads(args.threads),
    )
    out = _out_dir(args.out)
    _write_jsonl(results, out / "results.jsonl")
    finish_run(out, "decode", {**r, "ckpt": str(args.ckpt), "data": str(args.data)})
    return 0


def cmd_eval(args) -> int:
    results = _read_jsonl(args.hyp)
    records = read_corpus(_corpus_file(args.ref, "test"))
    by_id = {rec.id: rec for rec in records}
    missing = [row["id"] for row in results if row["id"] not in by_id]
    if missing:
        raise FormatError(f"hypotheses with no reference: {missing[:5]}")
    if args.constraints:
        given = {row["id"]: row.get("constraints", []) for row in _read_jsonl(args.constraints)}
        for row in results:
            row["constraints"] = given.get(row["id"], [])
    hyps = [row["tokens"] for row in results]
    refs = [by_id[row["id"]].tgt for row in results]
    bleu = bleu_corpus(hyps, refs)
    report = {
        "bleu": bleu.to_dict(),
        "csr": constraint_satisfaction_rate(hyps, [row.get("constraints", []) for row in results]),
        "modes": sorted({row.get("mode", "?") for row in results}),
        "n_sentences": len(results),
    }
    positions = [by_id[row["id"]].extra.get("homographs") for row in results]
    if all(p is not None for p in positions):
        report["homograph_accuracy"] = homograph_accuracy(hyps, refs, positions)
    out = _out_dir(args.out)
    _dump(report, out / "report.json")
    label = "/".join(report["modes"])
    table = f"{'method':>8}  {'BLEU':>6}  {'CSR':>6}\n{label:>8}  {bleu.bleu:6.2f}  {report['csr']:6.3f}\n"
    (out / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    finish_run(out, "eval", {"hyp": str(args.hyp), "ref": str(args.ref), "constraints": args.constraints})
    return 0


def cmd_sweep_blocks(args) -> int:
    r = resolve(args, ["model", "train", "decode", "sweep"])
    m, t, d, s = r["model"], r["train"], r["decode"], r["sweep"]
    blocks = parse_blocks(s["blocks"])
    m["n_blocks"] = max(m["n_blocks"], max(blocks))
    data = Path(args.data)
    train_recs = read_corpus(_corpus_file(str(data), "train"))
    test_recs = read_corpus(data / "test.jsonl") if data.is_dir() else train_recs
    threads = _threads(args.threads)
    mode = "base" if args.no_memory else "lcnmt"

    def run(block: Optional[int], seed: int) -> dict:
        model = train_model(
            train_recs, t["steps"], block, seed, t["batch_size"], t["p_drop"], t["lr"], t["warmup"], **_model_kw(m)
        )
        res = decode_corpus(
            model.params, model.config, test_recs, model.src_vocab, model.tgt_vocab, mode, d["beam"],
            s["ratio"] if mode == "lcnmt" else 0.0, d["seed"], d["alpha"], d["extra_len"], threads,
        )
        scores = score_results(res, test_recs)
        tail = model.history[-min(50, len(model.history)) :]
        scores["main_loss"] = statistics.fmean(h["main_loss"] for h in tail) if tail else math.nan
        return scores

    rows = []
    for b in blocks:
        log.info("block %d", b)
        row = run(None if args.no_memory else b, t["seed"])
        rows.append({"block": b, **row})
    noise = {}
    if args.no_memory:
        bleus = [rows[0]["bleu"]] + [run(None, t["seed"] + i)["bleu"] for i in range(1, s["noise_seeds"])]
        spread = max(bleus) - min(bleus)
        noise = {"seed_bleus": bleus, "bound": spread}
    report = {"memory": not args.no_memory, "rows": rows, "noise": noise}
    out = _out_dir(args.out)
    _dump(report, out / "report.json")
    table = format_block_table(rows)
    (out / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    finish_run(out, "sweep-blocks", {**r, "data": str(args.data), "no_memory": args.no_memory})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcnmt", description="Lexically constrained NMT lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate the synthetic homograph corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--sentences", type=int)
    sp.add_argument("--dev", type=int)
    sp.add_argument("--test", type=int)
    sp.add_argument("--src-vocab", dest="src_vocab", type=int)
    sp.add_argument("--homographs", type=int)
    sp.add_argument("--min-len", dest="min_len", type=int)
    sp.add_argument("--max-len", dest="max_len", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("extract", help="extract constraints from alignments and parse spans")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--max-phrase-len", dest="max_phrase_len", type=int)
    sp.add_argument("--min-phrase-len", dest="min_phrase_len", type=int)
    sp.set_defaults(func=cmd_extract)

    def model_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--d-model", dest="d_model", type=int)
        sp.add_argument("--n-blocks", dest="n_blocks", type=int)
        sp.add_argument("--n-heads", dest="n_heads", type=int)
        sp.add_argument("--ffn-width", dest="ffn_width", type=int)
        sp.add_argument("--lambda-att", dest="lambda_att", type=float)
        sp.add_argument("--p-drop", dest="p_drop", type=float)

    sp = sub.add_parser("train", help="train a base or memory-augmented model")
    model_flags(sp)
    sp.add_argument("--mode", choices=("base", "lcnmt"))
    sp.add_argument("--memory-block", dest="memory_block", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("decode", help="decode a corpus with a trained checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("base", "dba", "lcnmt"))
    sp.add_argument("--beam", type=int)
    sp.add_argument("--ratio", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--threads", type=int)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="score decode results")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--constraints", help="JSONL with id and constraints (defaults to those in --hyp)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep-blocks", help="train one model per memory block position and compare")
    model_flags(sp)
    sp.add_argument("--blocks")
    sp.add_argument("--ratio", type=float)
    sp.add_argument("--beam", type=int)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--noise-seeds", dest="noise_seeds", type=int)
    sp.add_argument("--no-memory", dest="no_memory", action="store_true")
    sp.set_defaults(func=cmd_sweep_blocks)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"lcnmt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (LcnmtError, OSError) as exc:
        print(f"lcnmt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"lcnmt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
