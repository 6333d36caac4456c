import pytest

from lcnmt.data import CorpusRecord, generate_homograph_corpus
from lcnmt.decoding import decode_corpus, pick_constraints
from lcnmt.errors import ConfigError
from lcnmt.pipeline import score_results, train_model

FIELDS = {"id", "mode", "tokens", "detok_text", "score", "constraints_given", "constraints_satisfied", "forward_calls"}


@pytest.fixture(scope="module")
def corpus():
    return generate_homograph_corpus(5, 60, n_test=8)


@pytest.fixture(scope="module")
def models(corpus):
    kw = dict(d_model=16, n_blocks=1, n_heads=2, ffn_width=16)
    return {
        "base": train_model(corpus["train"], 20, None, seed=0, batch_size=8, **kw),
        "lcnmt": train_model(corpus["train"], 20, 1, seed=0, batch_size=8, **kw),
    }


def run(model, records, mode, **kw):
    return decode_corpus(model.params, model.config, records, model.src_vocab, model.tgt_vocab, mode, k=4, **kw)


def test_result_rows_have_the_documented_fields(models, corpus):
    rows = run(models["base"], corpus["test"], "base")
    assert len(rows) == 8
    for row in rows:
        assert FIELDS <= set(row)
        assert row["detok_text"] == " ".join(row["tokens"])
        assert row["constraints_given"] == 0


def test_dba_at_ratio_zero_equals_base(models, corpus):
    base = run(models["base"], corpus["test"], "base")
    dba = run(models["base"], corpus["test"], "dba", ratio=0.0)
    assert [r["tokens"] for r in base] == [r["tokens"] for r in dba]
    assert [r["score"] for r in base] == [r["score"] for r in dba]


def test_dba_meets_constraints(models, corpus):
    rows = run(models["base"], corpus["test"], "dba", ratio=1.0)
    assert sum(r["constraints_given"] for r in rows) > 0
    assert all(r["constraints_satisfied"] == r["constraints_given"] for r in rows)


def test_lcnmt_runs_with_empty_constraint_sets(models, corpus):
    rows = run(models["lcnmt"], corpus["test"], "lcnmt", ratio=0.0)
    assert all(r["constraints_given"] == 0 for r in rows)


def test_mode_checkpoint_mismatch(models, corpus):
    with pytest.raises(ConfigError):
        run(models["base"], corpus["test"], "lcnmt")
    with pytest.raises(ConfigError):
        run(models["lcnmt"], corpus["test"], "dba")
    with pytest.raises(ConfigError):
        run(models["base"], corpus["test"], "beam")


def test_threads_do_not_change_results(models, corpus):
    one = run(models["lcnmt"], corpus["test"], "lcnmt", ratio=0.5, threads=1)
    four = run(models["lcnmt"], corpus["test"], "lcnmt", ratio=0.5, threads=4)
    assert one == four


def test_pick_constraints_pools_over_corpus():
    recs = [
        CorpusRecord(i, ["a"], ["b"], constraints=[{"src_tokens": ["a"], "tgt_tokens": [f"t{i}{j}"]} for j in range(n)])
        for i, n in enumerate([0, 3, 1, 2])
    ]
    picked = pick_constraints(recs, 0.5, seed=1)
    assert sum(map(len, picked)) == 3
    assert pick_constraints(recs, 0.5, seed=1) == picked
    assert [len(p) for p in pick_constraints(recs, 1.0, 0)] == [0, 3, 1, 2]


def test_score_results_reports_homograph_accuracy(models, corpus):
    rows = run(models["base"], corpus["test"], "base")
    report = score_results(rows, corpus["test"])
    assert 0.0 <= report["bleu"] <= 100.0
    assert "homograph_accuracy" in report
