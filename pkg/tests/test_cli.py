import json

import pytest

from lcnmt.cli import main, parse_blocks


def read(path):
    return path.read_bytes()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--seed", "3", "--sentences", "80", "--test", "6"]) == 0
    return out


def test_synth_writes_splits_sidecar_and_manifest(synth_dir):
    for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "lexicon.json", "resolved_config.json", "manifest.json"):
        assert (synth_dir / name).exists()
    resolved = json.loads((synth_dir / "resolved_config.json").read_text())
    assert resolved["synth"]["seed"] == 3 and resolved["synth"]["sentences"] == 80
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert "train.jsonl" in manifest["files"]
    assert len((synth_dir / "test.jsonl").read_text().splitlines()) == 6


def test_synth_is_byte_reproducible(synth_dir, tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--seed", "3", "--sentences", "80", "--test", "6"]) == 0
    for name in ("train.jsonl", "test.jsonl", "manifest.json"):
        assert read(tmp_path / name) == read(synth_dir / name)


def test_synth_zero_sentences(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--sentences", "0"]) == 0
    assert (tmp_path / "train.jsonl").read_text() == ""


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth"])
    assert exc.value.code == 2


def test_config_file_and_unknown_keys(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[synth]\nsentences = 12\nhomographs = 2\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    resolved = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
    assert resolved["synth"]["sentences"] == 12 and resolved["synth"]["homographs"] == 2
    cfg.write_text("[synth]\nbogus = 1\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 2


def test_extract_recovers_stats_and_warns_without_alignment(tmp_path, caplog):
    corpus = tmp_path / "in.jsonl"
    rows = [
        {"id": 0, "src": "wo sinian ni", "tgt": "I missed you", "alignment": "0-0 1-1 2-2",
         "src_spans": [[0, 1], [1, 3]], "tgt_spans": [[0, 1], [1, 3]]},
        {"id": 1, "src": "a b", "tgt": "x y"},
    ]
    corpus.write_text("".join(json.dumps(r) + "\n" for r in rows))
    with caplog.at_level("WARNING"):
        assert main(["extract", "--in", str(corpus), "--out", str(tmp_path / "x")]) == 0
    assert "no alignment" in caplog.text
    out = [json.loads(line) for line in (tmp_path / "x" / "corpus.jsonl").read_text().splitlines()]
    assert {"src_span": [1, 3], "tgt_span": [1, 3], "src_tokens": ["sinian", "ni"], "tgt_tokens": ["missed", "you"]} in out[0]["constraints"]
    assert out[1]["constraints"] == []
    stats = json.loads((tmp_path / "x" / "stats.json").read_text())
    assert stats == {"n_sentences": 2, "n_phrases": 2, "n_words_in_phrases": 3, "n_subwords_in_phrases": 3,
                     "avg_constraints_per_sentence": 1.5}


TRAIN_FLAGS = ["--steps", "15", "--d-model", "16", "--n-blocks", "2", "--n-heads", "2", "--ffn-width", "16",
               "--batch-size", "8", "--seed", "1"]


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = {}
    for mode in ("base", "lcnmt"):
        d = tmp_path_factory.mktemp(mode)
        assert main(["train", "--data", str(synth_dir), "--out", str(d), "--mode", mode, *TRAIN_FLAGS]) == 0
        out[mode] = d
    return out


def test_train_outputs_and_reproducibility(trained, synth_dir, tmp_path):
    d = trained["lcnmt"]
    assert (d / "model.ckpt").exists()
    log = [json.loads(line) for line in (d / "loss.jsonl").read_text().splitlines()]
    assert len(log) == 15 and log[0]["att_loss"] > 0
    assert main(["train", "--data", str(synth_dir), "--out", str(tmp_path), "--mode", "lcnmt", *TRAIN_FLAGS]) == 0
    assert read(tmp_path / "model.ckpt") == read(d / "model.ckpt")
    assert read(tmp_path / "loss.jsonl") == read(d / "loss.jsonl")


def test_train_base_ignores_memory_flags(synth_dir, tmp_path, caplog):
    with caplog.at_level("WARNING"):
        code = main(["train", "--data", str(synth_dir), "--out", str(tmp_path), "--mode", "base",
                     "--memory-block", "2", *TRAIN_FLAGS[:2]])
    assert code == 0
    assert "ignores" in caplog.text


def test_train_memory_block_out_of_range(synth_dir, tmp_path):
    code = main(["train", "--data", str(synth_dir), "--out", str(tmp_path), "--mode", "lcnmt",
                 "--memory-block", "7", *TRAIN_FLAGS])
    assert code == 2


def test_decode_and_eval_round(trained, synth_dir, tmp_path):
    ckpt = str(trained["lcnmt"] / "model.ckpt")
    args = ["decode", "--ckpt", ckpt, "--data", str(synth_dir), "--mode", "lcnmt", "--beam", "3", "--ratio", "1.0",
            "--threads", "2"]
    assert main([*args, "--out", str(tmp_path / "d1")]) == 0
    assert main([*args, "--out", str(tmp_path / "d2")]) == 0
    assert read(tmp_path / "d1" / "results.jsonl") == read(tmp_path / "d2" / "results.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "d1" / "results.jsonl").read_text().splitlines()]
    assert len(rows) == 6 and rows[0]["mode"] == "lcnmt"

    assert main(["eval", "--hyp", str(tmp_path / "d1" / "results.jsonl"), "--ref", str(synth_dir),
                 "--out", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert 0 <= report["bleu"]["bleu"] <= 100 and 0 <= report["csr"] <= 1
    assert "homograph_accuracy" in report
    assert (tmp_path / "e" / "table.txt").read_text().startswith("  method")


def test_decode_mode_mismatch_exit_code(trained, synth_dir, tmp_path):
    code = main(["decode", "--ckpt", str(trained["lcnmt"] / "model.ckpt"), "--data", str(synth_dir), "--mode", "base",
                 "--out", str(tmp_path)])
    assert code == 2


def test_corrupt_checkpoint_is_runtime_failure(trained, synth_dir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(read(trained["base"] / "model.ckpt")[:100])
    code = main(["decode", "--ckpt", str(bad), "--data", str(synth_dir), "--mode", "base", "--out", str(tmp_path / "o")])
    assert code == 1


def test_threads_env_fallback(trained, synth_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("LCMT_THREADS", "nope")
    code = main(["decode", "--ckpt", str(trained["base"] / "model.ckpt"), "--data", str(synth_dir), "--mode", "base",
                 "--out", str(tmp_path)])
    assert code == 2


def test_sweep_blocks_table_shape(synth_dir, tmp_path):
    code = main(["sweep-blocks", "--data", str(synth_dir), "--out", str(tmp_path), "--blocks", "1-3", "--beam", "2",
                 *TRAIN_FLAGS])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert [r["block"] for r in report["rows"]] == [1, 2, 3]
    assert all({"bleu", "csr", "main_loss"} <= set(r) for r in report["rows"])
    lines = (tmp_path / "table.txt").read_text().splitlines()
    assert lines[0].split() == ["block", "BLEU", "CSR", "main_loss"]
    assert len(lines) == 5


def test_sweep_without_memory_rows_agree_within_declared_noise(synth_dir, tmp_path):
    code = main(["sweep-blocks", "--data", str(synth_dir), "--out", str(tmp_path), "--blocks", "1,2", "--beam", "2",
                 "--no-memory", "--noise-seeds", "2", *TRAIN_FLAGS])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    bleus = [r["bleu"] for r in report["rows"]]
    assert max(bleus) - min(bleus) <= report["noise"]["bound"]


def test_parse_blocks():
    assert parse_blocks("1-3") == [1, 2, 3]
    assert parse_blocks("2,5") == [2, 5]
