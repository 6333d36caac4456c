import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcnmt.extraction import (
    PhrasePairCandidate,
    extract_consistent_phrases,
    extract_constraints,
    filter_by_parse_spans,
    resolve_overlaps,
    sample_constraints,
    sample_count,
)
from oracles import brute_force_phrases


def test_multiword_idiom_pair_is_extracted():
    src, tgt = "wo sinian ni".split(), "I missed you".split()
    links = [(0, 0), (1, 1), (2, 2)]
    spans = [(0, 1), (1, 2), (2, 3), (1, 3)]
    pairs = extract_constraints(src, tgt, links, spans, spans)
    assert [(p.source, p.target) for p in pairs] == [(("wo",), ("I",)), (("sinian", "ni"), ("missed", "you"))]


def test_unaligned_token_blocks_phrase():
    found = extract_consistent_phrases([(0, 0), (2, 1)], 3, 2)
    assert {(c.source_span, c.target_span) for c in found} == {((0, 1), (0, 1)), ((2, 3), (1, 2))}


def test_crossing_links_only_give_the_full_block():
    found = extract_consistent_phrases([(0, 1), (1, 0)], 2, 2)
    assert {(c.source_span, c.target_span) for c in found} == {((0, 1), (1, 2)), ((1, 2), (0, 1)), ((0, 2), (0, 2))}


def test_out_of_bounds_link():
    with pytest.raises(ValueError):
        extract_consistent_phrases([(3, 0)], 2, 2)


@st.composite
def aligned_pair(draw):
    m = draw(st.integers(1, 8))
    n = draw(st.integers(1, 8))
    links = draw(st.sets(st.tuples(st.integers(0, m - 1), st.integers(0, n - 1)), max_size=12))
    return m, n, links


@settings(max_examples=200, deadline=None)
@given(aligned_pair(), st.integers(1, 5))
def test_matches_brute_force_rectangles(case, max_len):
    m, n, links = case
    got = {(c.source_span, c.target_span) for c in extract_consistent_phrases(links, m, n, max_len)}
    assert got == brute_force_phrases(links, m, n, max_len)


def test_parse_filter_needs_both_sides():
    a = PhrasePairCandidate((0, 1), (0, 1))
    b = PhrasePairCandidate((1, 2), (1, 2))
    assert filter_by_parse_spans({a, b}, [(0, 1), (1, 2)], [(0, 1)]) == {a}


def test_overlap_resolution_prefers_longest_then_leftmost():
    cands = [
        PhrasePairCandidate((0, 1), (0, 1)),
        PhrasePairCandidate((0, 2), (0, 2)),
        PhrasePairCandidate((1, 3), (1, 3)),
        PhrasePairCandidate((3, 4), (3, 4)),
    ]
    assert resolve_overlaps(cands) == [PhrasePairCandidate((0, 2), (0, 2)), PhrasePairCandidate((3, 4), (3, 4))]


def test_min_phrase_len_and_missing_annotations():
    links = [(0, 0), (1, 1)]
    spans = [(0, 1), (1, 2), (0, 2)]
    assert extract_constraints("a b".split(), "x y".split(), links, spans, spans, min_phrase_len=2)[0].source == ("a", "b")
    assert extract_constraints("a b".split(), "x y".split(), None, spans, spans) == []
    assert extract_constraints("a b".split(), "x y".split(), links, None, spans) == []


@pytest.mark.parametrize("ratio,n,expected", [(0.5, 5, 3), (0.3, 10, 3), (0.7, 3, 2), (0.0, 4, 0), (1.0, 4, 4), (0.5, 1, 1)])
def test_sample_count_rounds_half_up(ratio, n, expected):
    assert sample_count(ratio, n) == expected


def test_sample_constraints_is_seeded_subset_in_order():
    items = list(range(20))
    a = sample_constraints(items, 0.5, seed=3)
    assert a == sample_constraints(items, 0.5, seed=3)
    assert len(a) == 10 and a == sorted(a)
    assert sample_constraints(items, 1.0, 0) == items
    with pytest.raises(ValueError):
        sample_constraints(items, 1.5, 0)
