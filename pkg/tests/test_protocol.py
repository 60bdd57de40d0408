from pathlib import Path

import pytest

from activedx.environment import AVAILABLE, UNAVAILABLE, OracleAnswer, unavailable_message
from activedx.errors import AmbiguousStatus, EmptySection, ExtractionParseError, MissingSection
from activedx.gateway import ScriptedChatBackend
from activedx.protocol import (
    CONTINUE,
    DONE,
    EMPTY_BLOCK_MARKER,
    FREE_FORM,
    HEADERS,
    NO_NEW_RESULTS_MARKER,
    NOT_REQUIRED,
    STRUCTURED,
    ChatExtractionBackend,
    DdxEntry,
    TurnRecord,
    cumulative_blocks,
    extract_tests,
    parse_turn_reply,
    render_followup_prompt,
    render_initial_prompt,
    render_oracle_results,
    render_recent_turns,
    render_sections,
    split_sections,
    system_prompt,
)

REPLIES = Path(__file__).parent / "data" / "replies"

# Per-fixture expectations. "error" names the typed error the parser must
# raise; otherwise the listed TurnRecord fields must match exactly.
CORPUS = {
    "01_well_formed_continue": dict(
        status=CONTINUE,
        top="Iron Deficiency Anemia",
        n_ddx=2,
        actions=[
            ("Serum Ferritin", "confirm depleted iron stores"),
            ("Complete Blood Count (CBC)", "characterize the anemia"),
        ],
        additional=NOT_REQUIRED,
        conclusion="Awaiting iron studies before committing to a final diagnosis.",
        tests=["Serum Ferritin", "Complete Blood Count (CBC)"],
    ),
    "02_well_formed_done": dict(
        status=DONE,
        top="Iron Deficiency Anemia",
        n_ddx=1,
        actions=[],
        additional=NOT_REQUIRED,
        conclusion="Iron Deficiency Anemia secondary to chronic blood loss.",
        tests=[],
    ),
    "03_bold_headers": dict(status=CONTINUE, top="Hypothyroidism", n_ddx=2),
    "04_reordered_headers": dict(status=CONTINUE, top="Acute Appendicitis", n_ddx=2),
    "05_lowercase_status": dict(status=CONTINUE, top="Viral Gastroenteritis"),
    "06_status_sentence": dict(status=CONTINUE, top="Iron Deficiency Anemia"),
    "07_no_space_after_hashes": dict(status=CONTINUE, top="Hashimoto Thyroiditis"),
    "08_whitespace_tolerant": dict(status=CONTINUE, top="Celiac Disease"),
    "09_rationale_punctuation": dict(
        status=CONTINUE,
        ddx=[
            DdxEntry(1, "Hashimoto Thyroiditis", "TPO positivity (strongly) suggests it"),
            DdxEntry(2, "Graves Disease", ""),
        ],
    ),
    "10_paren_enumeration": dict(
        status=CONTINUE,
        n_ddx=2,
        actions=[
            ("CT Abdomen and Pelvis", "definitive imaging"),
            ("C-Reactive Protein (CRP)", "trend inflammation"),
        ],
    ),
    "11_additional_categorized": dict(
        status=CONTINUE,
        additional=[
            ("History", "duration and progression of fatigue"),
            ("Physical Exam", "conjunctival pallor assessment"),
            ("", "repeat ferritin after an iron course"),
        ],
    ),
    "12_unnumbered_lists": dict(
        status=CONTINUE,
        ddx=[
            DdxEntry(1, "Iron Deficiency Anemia", ""),
            DdxEntry(2, "Vitamin B12 Deficiency", ""),
        ],
        actions=[("Serum Ferritin", ""), ("Serum Vitamin B12", "")],
    ),
    "13_unknown_extra_header": dict(status=CONTINUE, top="Sarcoidosis", n_ddx=1),
    "14_duplicate_header": dict(status=CONTINUE, top="Acute Appendicitis", n_ddx=2),
    "15_varied_hash_depth": dict(status=CONTINUE, top="Anemia", n_ddx=1),
    "16_instruction_brackets": dict(
        status=CONTINUE,
        n_ddx=2,
        actions=[("Abdominal Ultrasound", "visualize the appendix")],
    ),
    "17_compound_actions": dict(
        status=CONTINUE,
        actions=[("CBC, CRP", "baseline labs")],
        tests=["CBC", "CRP"],
    ),
    "18_none_actions_dot": dict(status=CONTINUE, actions=[], tests=[]),
    "19_missing_pivot": dict(error=MissingSection),
    "20_missing_conclusion": dict(error=MissingSection),
    "21_empty_ddx": dict(error=EmptySection),
    "22_ambiguous_status": dict(error=AmbiguousStatus),
    "23_status_done_last_token": dict(
        status=DONE, conclusion="Acute Appendicitis, surgical consult placed."
    ),
    "24_free_form_basic": dict(
        mode=FREE_FORM,
        status=CONTINUE,
        top="Iron Deficiency Anemia",
        n_ddx=2,
        actions=[("Serum Ferritin", ""), ("Serum Vitamin B12", "")],
        conclusion="Need the iron studies before finalizing anything.",
    ),
    "25_free_form_done": dict(
        mode=FREE_FORM, status=DONE, top="Acute Appendicitis", conclusion="Acute Appendicitis"
    ),
    "26_free_form_no_markers": dict(
        mode=FREE_FORM,
        status=CONTINUE,
        n_ddx=0,
        actions=[],
        conclusion="This is acute appendicitis.",
    ),
    "27_free_form_compound_tests": dict(
        mode=FREE_FORM,
        status=CONTINUE,
        actions=[("TSH", ""), ("Free T4", ""), ("Thyroid Peroxidase Antibody", "")],
    ),
}


def _load(stem: str) -> str:
    return (REPLIES / f"{stem}.txt").read_text(encoding="utf-8")


def test_corpus_is_complete_and_in_sync():
    stems = sorted(p.stem for p in REPLIES.glob("*.txt"))
    assert stems == sorted(CORPUS)
    assert len(stems) >= 20


@pytest.mark.parametrize("stem", sorted(CORPUS))
def test_corpus_fixture(stem):
    expected = CORPUS[stem]
    mode = expected.get("mode", STRUCTURED)
    raw = _load(stem)
    if "error" in expected:
        with pytest.raises(expected["error"]):
            parse_turn_reply(raw, mode=mode)
        return
    record = parse_turn_reply(raw, mode=mode, turn_index=3)
    assert record.mode == mode
    assert record.turn_index == 3
    assert record.raw_reply == raw
    assert record.status == expected["status"]
    if "top" in expected:
        assert record.top_diagnosis() == expected["top"]
    if "n_ddx" in expected:
        assert len(record.ddx) == expected["n_ddx"]
    if "ddx" in expected:
        assert record.ddx == expected["ddx"]
    if "actions" in expected:
        assert record.primary_actions == expected["actions"]
    if "additional" in expected:
        assert record.additional_info == expected["additional"]
    if "conclusion" in expected:
        assert record.conclusion == expected["conclusion"]
    if "tests" in expected:
        assert extract_tests(record) == expected["tests"]


@pytest.mark.parametrize(
    "stem",
    sorted(s for s, e in CORPUS.items() if "error" not in e and e.get("mode") != FREE_FORM),
)
def test_structured_sections_round_trip(stem):
    record = parse_turn_reply(_load(stem))
    assert set(record.sections) == set(HEADERS)
    again = split_sections(render_sections(record))
    assert again == record.sections


def test_unknown_header_content_stays_in_prior_section():
    record = parse_turn_reply(_load("13_unknown_extra_header"))
    assert "scratch thinking that belongs to the pivot section" in record.pivot


def test_duplicate_header_first_occurrence_wins():
    record = parse_turn_reply(_load("14_duplicate_header"))
    assert all(e.diagnosis != "Wrong Entry" for e in record.ddx)


def test_additional_tests_are_orderable():
    record = parse_turn_reply(_load("11_additional_categorized"))
    assert extract_tests(record, include_additional=False) == ["Serum Ferritin"]
    with_extra = extract_tests(record, include_additional=True)
    assert with_extra[0] == "Serum Ferritin"
    assert "conjunctival pallor assessment" in with_extra


def test_top_diagnosis_empty():
    assert TurnRecord().top_diagnosis() is None


# --- prompt rendering --------------------------------------------------------


def _avail(name, result, matched=None):
    return OracleAnswer(requested_name=name, status=AVAILABLE, result=result, matched_entry=matched)


def _unavail(name):
    return OracleAnswer(requested_name=name, status=UNAVAILABLE)


def test_render_oracle_results():
    assert render_oracle_results([]) == NO_NEW_RESULTS_MARKER
    text = render_oracle_results([_avail("CBC", "Hgb 9.1"), _unavail("TSH")])
    assert text.splitlines()[0] == "- CBC: Hgb 9.1"
    assert text.splitlines()[1] == "- " + unavailable_message("TSH")


def test_cumulative_blocks_dedupe_and_markers():
    assert cumulative_blocks([]) == (EMPTY_BLOCK_MARKER, EMPTY_BLOCK_MARKER)
    record = TurnRecord()
    history = [
        (record, [_avail("CBC", "Hgb 9.1", matched="Complete Blood Count (CBC)"), _unavail("TSH")]),
        (record, [_avail("complete blood count (cbc)", "Hgb 9.1", matched="Complete Blood Count (CBC)"), _unavail("tsh")]),
    ]
    done, unavailable = cumulative_blocks(history)
    assert done == "- Complete Blood Count (CBC): Hgb 9.1"
    assert unavailable == "- TSH"


def test_render_recent_turns_window():
    records = [
        TurnRecord(turn_index=i, ddx=[DdxEntry(1, f"Dx {i}")], conclusion=f"c{i}")
        for i in (1, 2, 3)
    ]
    text = render_recent_turns(records, window_size=2)
    assert "Turn 1:" not in text
    assert "Turn 2:" in text and "Turn 3:" in text
    assert render_recent_turns([], window_size=2) == "(no prior turns)"
    assert render_recent_turns(records, window_size=0) == "(no prior turns)"


def test_render_initial_prompt_modes(toy_envs):
    env = toy_envs["toy-anemia-001"]
    sys_s, user_s = render_initial_prompt(env, mode=STRUCTURED)
    sys_f, user_f = render_initial_prompt(env, mode=FREE_FORM)
    assert sys_s == sys_f == system_prompt()
    assert env.initial_observation in user_s
    assert env.initial_observation in user_f
    assert user_s != user_f
    assert "### DDx List:" in user_s
    assert "### DDx List:" not in user_f


def test_render_followup_prompt_blocks(toy_envs):
    env = toy_envs["toy-anemia-001"]
    record = parse_turn_reply(_load("01_well_formed_continue"))
    history = [(record, [_avail("CBC", "Hgb 9.1", matched="Complete Blood Count (CBC)"), _unavail("TSH")])]
    new = [_avail("Serum Ferritin", "6 ng/mL (low).", matched="Serum Ferritin")]
    system, user = render_followup_prompt(env, history, new, window_size=2)
    assert system == system_prompt()
    assert "- Complete Blood Count (CBC): Hgb 9.1" in user
    assert "- TSH" in user
    assert "- Serum Ferritin: 6 ng/mL (low)." in user
    assert "Turn 1:" in user
    assert "last 2 turn(s)" in user


def test_followup_prompt_empty_history_markers(toy_envs):
    env = toy_envs["toy-anemia-001"]
    _system, user = render_followup_prompt(env, [], [], window_size=2)
    assert EMPTY_BLOCK_MARKER in user
    assert NO_NEW_RESULTS_MARKER in user
    assert "(no prior turns)" in user


def test_prompts_never_leak_ground_truth(toy_envs):
    for env in toy_envs.values():
        for mode in (STRUCTURED, FREE_FORM):
            _system, user = render_initial_prompt(env, mode=mode)
            assert env.ground_truth_diagnosis not in user
            assert "gtsentinel" not in user
        _system, user = render_followup_prompt(env, [], [], mode=mode)
        assert "gtsentinel" not in user


# --- chat-backed test extraction ---------------------------------------------


def _extraction_backend(reply: str) -> ChatExtractionBackend:
    return ChatExtractionBackend(ScriptedChatBackend({"": {"*": {"*": reply}}}))


def test_chat_extraction_happy_path():
    record = parse_turn_reply(_load("01_well_formed_continue"))
    backend = _extraction_backend('["CBC", "TSH", "cbc"]')
    assert extract_tests(record, backend) == ["CBC", "TSH"]


def test_chat_extraction_bad_json():
    record = parse_turn_reply(_load("01_well_formed_continue"))
    with pytest.raises(ExtractionParseError):
        extract_tests(record, _extraction_backend("not json"))
    with pytest.raises(ExtractionParseError):
        extract_tests(record, _extraction_backend('{"tests": []}'))
    with pytest.raises(ExtractionParseError):
        extract_tests(record, _extraction_backend('["ok", 3]'))
