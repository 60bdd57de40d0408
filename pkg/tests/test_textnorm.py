import pytest
from hypothesis import given
from hypothesis import strategies as st

from activedx.textnorm import dedupe_normalized, normalize, overlap_score, split_compound, token_set


def test_normalize_lowercases_and_collapses():
    assert normalize("  Iron-Deficiency   Anemia ") == "iron deficiency anemia"
    assert normalize("CT (Abdomen/Pelvis)") == "ct abdomen pelvis"
    assert normalize("...") == ""


def test_token_set():
    assert token_set("Complete Blood Count (CBC)") == frozenset({"complete", "blood", "count", "cbc"})
    assert token_set("") == frozenset()


def test_overlap_score_subset_names_match_fully():
    # Acronym request against the expanded menu name must score 1.0.
    assert overlap_score("CBC", "Complete Blood Count (CBC)") == 1.0


def test_overlap_score_punctuation_invariant():
    assert overlap_score("iron-deficiency anemia", "Iron Deficiency Anemia") == 1.0


def test_overlap_score_partial():
    # one shared token, smaller side has two
    assert overlap_score("MRI Brain", "CT Brain") == pytest.approx(0.5)


def test_overlap_score_empty_sides():
    assert overlap_score("", "CBC") == 0.0
    assert overlap_score("CBC", "!!!") == 0.0


def test_split_compound():
    assert split_compound("CBC, CMP / TSH") == ["CBC", "CMP", "TSH"]
    assert split_compound("Complete Blood Count (CBC)") == ["Complete Blood Count (CBC)"]
    assert split_compound(" , ") == []


def test_dedupe_normalized_keeps_first_spelling():
    assert dedupe_normalized(["CBC", "cbc", " CBC ", "TSH", "..."]) == ["CBC", "TSH"]


@given(st.text(max_size=80))
def test_normalize_idempotent(s):
    assert normalize(normalize(s)) == normalize(s)


@given(st.text(max_size=60), st.text(max_size=60))
def test_overlap_symmetric_and_bounded(a, b):
    score = overlap_score(a, b)
    assert score == overlap_score(b, a)
    assert 0.0 <= score <= 1.0


@given(st.text(min_size=1, max_size=60))
def test_overlap_self_is_one_when_tokens_exist(s):
    if token_set(s):
        assert overlap_score(s, s) == 1.0
