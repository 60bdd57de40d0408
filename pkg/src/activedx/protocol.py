"""Agent-facing prompt assembly and structured reply parsing.

The structured protocol is seven ``### Header:`` sections in a fixed
nominal order. The parser is tolerant of markdown bolding, missing spaces
after ``###``, stray whitespace around the colon, and reordered sections;
it is strict about the sections existing and about DDx, Diagnostic Status,
and Conclusion being non-empty. Free-form mode requires only trailing
``Status:`` / ``Conclusion:`` lines.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .environment import AVAILABLE, ClinicalEnvironment, OracleAnswer
from .errors import AmbiguousStatus, EmptySection, ExtractionParseError, MissingSection
from .prompts import render_template
from .textnorm import dedupe_normalized, normalize, split_compound

STRUCTURED = "structured"
FREE_FORM = "free_form"

DONE = "DONE"
CONTINUE = "CONTINUE"

NOT_REQUIRED = "Not required."

HEADERS = (
    "Chain of Thought",
    "DDx List",
    "Pivot",
    "Primary Actions",
    "Additional Information Required",
    "Diagnostic Status",
    "Conclusion",
)

EMPTY_BLOCK_MARKER = "None yet"
NO_NEW_RESULTS_MARKER = "None."

FORMAT_REMINDER = (
    "\n\nREMINDER: Your previous reply did not follow the required format. "
    "Respond again using EXACTLY the required section headers, in the required order, "
    "each starting with ### and ending with a colon."
)

_HEADER_LINE = re.compile(
    r"^[ \t]*\**[ \t]*#{1,6}[ \t]*\**[ \t]*(?P<name>[A-Za-z][A-Za-z /()-]*?)[ \t]*\**[ \t]*:[ \t]*\**[ \t]*$",
    re.MULTILINE,
)
_ENUMERATED = re.compile(r"^\s*(\d+)[.)]\s*(.+?)\s*$")
_STATUS_TOKEN = re.compile(r"\b(done|continue)\b", re.IGNORECASE)
_FREE_STATUS_LINE = re.compile(r"^\s*\**\s*status\s*\**\s*:\s*\**\s*(?P<rest>.*)$", re.IGNORECASE)
_FREE_CONCLUSION_LINE = re.compile(r"^\s*\**\s*conclusion\s*\**\s*:\s*\**\s*(?P<rest>.*)$", re.IGNORECASE)
_FREE_TESTS_LINE = re.compile(r"^\s*\**\s*tests?\s*\**\s*:\s*\**\s*(?P<rest>.*)$", re.IGNORECASE)

_CANONICAL_HEADER = {normalize(h): h for h in HEADERS}


@dataclass
class DdxEntry:
    rank: int
    diagnosis: str
    rationale: str = ""


@dataclass
class TurnRecord:
    turn_index: int = 1
    observation_digest: str = ""
    chain_of_thought: str = ""
    ddx: list[DdxEntry] = field(default_factory=list)
    pivot: str = ""
    primary_actions: list[tuple[str, str]] = field(default_factory=list)
    # Either the parsed (category, request) pairs or the literal "Not required."
    additional_info: "list[tuple[str, str]] | str" = field(default_factory=list)
    status: str = CONTINUE
    conclusion: str = ""
    raw_reply: str = ""
    mode: str = STRUCTURED
    sections: dict[str, str] = field(default_factory=dict)

    def top_diagnosis(self) -> str | None:
        return self.ddx[0].diagnosis if self.ddx else None


# --- rendering --------------------------------------------------------------


def system_prompt() -> str:
    return render_template("system").strip()


def render_initial_prompt(env: ClinicalEnvironment, mode: str = STRUCTURED) -> tuple[str, str]:
    """Returns (system, user). Builds only from agent-visible fields."""
    template = "initial_turn" if mode == STRUCTURED else "free_form_initial"
    return system_prompt(), render_template(template, case=env.initial_observation)


def render_oracle_results(answers: Sequence[OracleAnswer]) -> str:
    if not answers:
        return NO_NEW_RESULTS_MARKER
    return "\n".join(f"- {a.render()}" for a in answers)


def cumulative_blocks(
    history: Sequence[tuple[TurnRecord, Sequence[OracleAnswer]]],
) -> tuple[str, str]:
    """(done_tests_block, unavailable_tests_block) from every answer so far."""
    done: list[str] = []
    unavailable: list[str] = []
    seen_done: set[str] = set()
    seen_unavailable: set[str] = set()
    for _record, answers in history:
        for ans in answers:
            if ans.status == AVAILABLE:
                key = normalize(ans.matched_entry or ans.requested_name)
                if key not in seen_done:
                    seen_done.add(key)
                    done.append(f"- {ans.matched_entry or ans.requested_name}: {ans.result}")
            else:
                key = normalize(ans.requested_name)
                if key not in seen_unavailable:
                    seen_unavailable.add(key)
                    unavailable.append(f"- {ans.requested_name}")
    done_block = "\n".join(done) if done else EMPTY_BLOCK_MARKER
    unavailable_block = "\n".join(unavailable) if unavailable else EMPTY_BLOCK_MARKER
    return done_block, unavailable_block


def render_turn_summary(record: TurnRecord) -> str:
    lines = [f"Turn {record.turn_index}:"]
    if record.chain_of_thought:
        lines.append(f"Chain of Thought: {record.chain_of_thought}")
    if record.ddx:
        lines.append("DDx List:")
        for entry in record.ddx:
            suffix = f" - {entry.rationale}" if entry.rationale else ""
            lines.append(f"{entry.rank}. {entry.diagnosis}{suffix}")
    if record.pivot:
        lines.append(f"Pivot: {record.pivot}")
    lines.append(f"Diagnostic Status: {record.status}")
    if record.conclusion:
        lines.append(f"Conclusion: {record.conclusion}")
    return "\n".join(lines)


def render_recent_turns(history: Sequence[TurnRecord], window_size: int) -> str:
    recent = list(history)[-window_size:] if window_size > 0 else []
    if not recent:
        return "(no prior turns)"
    return "\n\n".join(render_turn_summary(r) for r in recent)


def render_followup_prompt(
    env: ClinicalEnvironment,
    history: Sequence[tuple[TurnRecord, Sequence[OracleAnswer]]],
    new_answers: Sequence[OracleAnswer],
    window_size: int = 2,
    mode: str = STRUCTURED,
) -> tuple[str, str]:
    """Returns (system, user) for turn len(history)+1.

    ``history`` is every prior turn with the answers it produced;
    ``new_answers`` is what the immediately preceding turn ordered, shown in
    the NEW RESULTS block. Cumulative blocks are unions over all of history.
    """
    done_block, unavailable_block = cumulative_blocks(history)
    template = "followup_turn" if mode == STRUCTURED else "free_form_followup"
    user = render_template(
        template,
        case=env.initial_observation,
        done_tests_block=done_block,
        unavailable_tests_block=unavailable_block,
        window_size=str(window_size),
        recent_turns_block=render_recent_turns([r for r, _ in history], window_size),
        oracle_results=render_oracle_results(new_answers),
    )
    return system_prompt(), user


# --- parsing ----------------------------------------------------------------


def split_sections(raw: str) -> dict[str, str]:
    """Raw text between recognized headers, keyed by canonical header name.

    Unknown ``### Whatever:`` lines do not open sections; their text stays
    with the preceding recognized section. The first occurrence of a header
    wins. Content is stripped of surrounding blank space only.
    """
    matches = []
    for m in _HEADER_LINE.finditer(raw):
        canonical = _CANONICAL_HEADER.get(normalize(m.group("name")))
        if canonical is not None:
            matches.append((m.start(), m.end(), canonical))
    sections: dict[str, str] = {}
    for i, (_start, end, name) in enumerate(matches):
        if name in sections:
            continue
        next_start = len(raw)
        for start2, _end2, _name2 in matches[i + 1 :]:
            next_start = start2
            break
        sections[name] = raw[end:next_start].strip()
    return sections


def _is_instruction_line(line: str) -> bool:
    stripped = line.strip()
    return stripped.startswith("[") and stripped.endswith("]")


def _enumerated_entries(content: str) -> list[str]:
    entries = []
    for line in content.splitlines():
        if _is_instruction_line(line):
            continue
        m = _ENUMERATED.match(line)
        if m:
            entries.append(m.group(2))
    if entries:
        return entries
    # Tolerant fallback: unnumbered non-empty lines count as entries.
    return [
        line.strip()
        for line in content.splitlines()
        if line.strip() and not _is_instruction_line(line)
    ]


def _parse_ddx(content: str) -> list[DdxEntry]:
    entries = []
    for i, text in enumerate(_enumerated_entries(content), start=1):
        diagnosis, sep, rationale = text.partition(" - ")
        entries.append(DdxEntry(rank=i, diagnosis=diagnosis.strip(), rationale=rationale.strip() if sep else ""))
    return entries


_NO_ACTION_MARKERS = {"none", "none required", "not required", "no new tests", "n a"}


def _parse_actions(content: str) -> list[tuple[str, str]]:
    if normalize(content) in _NO_ACTION_MARKERS:
        return []
    actions = []
    for text in _enumerated_entries(content):
        name, sep, purpose = text.partition(" - ")
        actions.append((name.strip(), purpose.strip() if sep else ""))
    return actions


def _parse_additional(content: str) -> "list[tuple[str, str]] | str":
    if normalize(content) == normalize(NOT_REQUIRED):
        return NOT_REQUIRED
    requests = []
    for text in _enumerated_entries(content):
        category, sep, request = text.partition(":")
        if sep:
            requests.append((category.strip(), request.strip()))
        else:
            requests.append(("", text.strip()))
    return requests


def _parse_status(content: str) -> str:
    tokens = _STATUS_TOKEN.findall(content)
    if not tokens:
        raise AmbiguousStatus(content.strip()[:80])
    return tokens[-1].upper()


def _parse_structured(raw: str, turn_index: int) -> TurnRecord:
    sections = split_sections(raw)
    for header in HEADERS:
        if header not in sections:
            raise MissingSection(header)
    for header in ("DDx List", "Diagnostic Status", "Conclusion"):
        if not sections[header].strip():
            raise EmptySection(header)

    status = _parse_status(sections["Diagnostic Status"])
    conclusion = sections["Conclusion"].strip()
    ddx = _parse_ddx(sections["DDx List"])
    if not ddx:
        raise EmptySection("DDx List")
    if status == DONE and not conclusion:
        raise EmptySection("Conclusion")

    return TurnRecord(
        turn_index=turn_index,
        chain_of_thought=sections["Chain of Thought"],
        ddx=ddx,
        pivot=sections["Pivot"],
        primary_actions=_parse_actions(sections["Primary Actions"]),
        additional_info=_parse_additional(sections["Additional Information Required"]),
        status=status,
        conclusion=conclusion,
        raw_reply=raw,
        mode=STRUCTURED,
        sections=sections,
    )


def _free_form_ddx(raw: str) -> list[DdxEntry]:
    # Best effort: an enumerated block following a line that mentions
    # "differential" is read as the ranked DDx.
    lines = raw.splitlines()
    for i, line in enumerate(lines):
        if "differential" not in line.lower():
            continue
        entries: list[str] = []
        for candidate in lines[i + 1 :]:
            if not candidate.strip():
                if entries:
                    break
                continue
            m = _ENUMERATED.match(candidate)
            if m:
                entries.append(m.group(2))
            elif entries:
                break
            else:
                break
        if entries:
            out = []
            for rank, text in enumerate(entries, start=1):
                diagnosis, sep, rationale = text.partition(" - ")
                out.append(DdxEntry(rank=rank, diagnosis=diagnosis.strip(), rationale=rationale.strip() if sep else ""))
            return out
    return []


def _parse_free_form(raw: str, turn_index: int) -> TurnRecord:
    status = CONTINUE
    status_rest = None
    conclusion = ""
    tests: list[str] = []
    for line in raw.splitlines():
        m = _FREE_STATUS_LINE.match(line)
        if m:
            status_rest = m.group("rest")
        m = _FREE_CONCLUSION_LINE.match(line)
        if m and m.group("rest").strip("* \t"):
            conclusion = m.group("rest").strip("* \t")
        m = _FREE_TESTS_LINE.match(line)
        if m and m.group("rest").strip("* \t"):
            tests.extend(split_compound(m.group("rest").strip("* \t")))
    if status_rest is not None:
        tokens = _STATUS_TOKEN.findall(status_rest)
        if tokens:
            status = tokens[-1].upper()
    if not conclusion:
        non_empty = [line.strip() for line in raw.splitlines() if line.strip()]
        conclusion = non_empty[-1] if non_empty else ""

    return TurnRecord(
        turn_index=turn_index,
        chain_of_thought=raw,
        ddx=_free_form_ddx(raw),
        pivot="",
        primary_actions=[(t, "") for t in dedupe_normalized(tests)],
        additional_info=[],
        status=status,
        conclusion=conclusion,
        raw_reply=raw,
        mode=FREE_FORM,
        sections={},
    )


def parse_turn_reply(raw: str, mode: str = STRUCTURED, turn_index: int = 1) -> TurnRecord:
    """Parse one model reply. Raises MissingSection / EmptySection /
    AmbiguousStatus for structured replies; free-form never raises."""
    if mode == FREE_FORM:
        return _parse_free_form(raw, turn_index)
    return _parse_structured(raw, turn_index)


def render_sections(record: TurnRecord) -> str:
    """Re-emit the parsed sections verbatim (round-trip check helper)."""
    parts = []
    for header in HEADERS:
        if header in record.sections:
            parts.append(f"### {header}:\n{record.sections[header]}")
    return "\n\n".join(parts)


# --- test extraction --------------------------------------------------------


class ExtractionBackend(Protocol):
    def extract(self, raw_reply: str) -> list[str]: ...


def extract_tests(
    record: TurnRecord,
    backend: ExtractionBackend | None = None,
    *,
    include_additional: bool = True,
) -> list[str]:
    """Ordered-test names for a turn.

    Deterministic default: primary action names plus additional-information
    requests, compounds split on commas/slashes, deduped after
    normalization, order preserved. A chat backend replaces the whole
    procedure when provided.
    """
    if backend is not None:
        return dedupe_normalized(backend.extract(record.raw_reply))
    names: list[str] = []
    for name, _purpose in record.primary_actions:
        names.extend(split_compound(name))
    if include_additional and isinstance(record.additional_info, list):
        for _category, request in record.additional_info:
            names.extend(split_compound(request))
    return dedupe_normalized(names)


class ChatExtractionBackend:
    """Gateway-backed extraction using the JSON-array prompt."""

    def __init__(self, backend, model_id: str = "extractor", temperature: float = 0.0) -> None:
        # ``backend`` is any chat backend object accepted by gateway.complete.
        from .gateway import ChatRequest, complete  # local import to avoid a cycle

        self._complete = complete
        self._request_type = ChatRequest
        self._backend = backend
        self._model_id = model_id
        self._temperature = temperature

    def extract(self, raw_reply: str) -> list[str]:
        request = self._request_type(
            model_id=self._model_id,
            messages=(("system", render_template("extract_tests")), ("user", raw_reply)),
            temperature=self._temperature,
        )
        reply = self._complete(request, self._backend)
        try:
            payload = json.loads(reply.strip())
        except json.JSONDecodeError as exc:
            raise ExtractionParseError(str(exc)) from exc
        if not isinstance(payload, list) or any(not isinstance(item, str) for item in payload):
            raise ExtractionParseError("expected a flat array of strings")
        return payload
