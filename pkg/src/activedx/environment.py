"""Clinical case environments and the documented-results oracle.

A case file fixes everything the simulation may reveal: the initial
observation, a closed menu of documented tests with their results, and the
ground-truth diagnosis (never shown to the agent). The oracle answers test
requests strictly from the menu; anything undocumented is UNAVAILABLE.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .errors import DuplicateTest, SchemaViolation
from .textnorm import normalize, overlap_score

logger = logging.getLogger(__name__)

AVAILABLE = "AVAILABLE"
UNAVAILABLE = "UNAVAILABLE"

ORACLE_MATCH_THRESHOLD = 0.85

# Wording shown to the agent for undocumented tests. The test name is the
# only parameter.
UNAVAILABLE_TEMPLATE = (
    "{name}: This test is currently UNAVAILABLE due to equipment maintenance "
    "or lack of specialized personnel. You must proceed with clinical "
    "diagnosis or alternative available testing."
)


def unavailable_message(name: str) -> str:
    return UNAVAILABLE_TEMPLATE.format(name=name)


@dataclass(frozen=True)
class TestEntry:
    name: str
    result: str


@dataclass(frozen=True)
class ClinicalEnvironment:
    case_id: str
    initial_observation: str
    ground_truth_diagnosis: str
    test_menu: tuple[TestEntry, ...]
    metadata: dict[str, str] = field(default_factory=dict)
    # Optional curated list of tests a perfect workup would order; used only
    # by evaluation when present. Falls back to the menu names otherwise.
    gt_tests: tuple[str, ...] = ()

    def menu_names(self) -> list[str]:
        return [entry.name for entry in self.test_menu]

    def ground_truth_tests(self) -> list[str]:
        return list(self.gt_tests) if self.gt_tests else self.menu_names()


@dataclass(frozen=True)
class OracleAnswer:
    requested_name: str
    status: str  # AVAILABLE | UNAVAILABLE
    result: str | None = None
    matched_entry: str | None = None

    def render(self) -> str:
        if self.status == AVAILABLE:
            return f"{self.requested_name}: {self.result}"
        return unavailable_message(self.requested_name)


def _require_str(payload: dict, key: str) -> str:
    value = payload.get(key)
    if not isinstance(value, str) or not value.strip():
        raise SchemaViolation(key, "required non-empty string")
    return value


def validate_case(payload: dict) -> ClinicalEnvironment:
    """Build an environment from a parsed case dict, enforcing the schema."""
    if not isinstance(payload, dict):
        raise SchemaViolation("<root>", "case payload must be a JSON object")
    case_id = _require_str(payload, "case_id")
    observation = _require_str(payload, "initial_observation")
    ground_truth = _require_str(payload, "ground_truth_diagnosis")

    raw_menu = payload.get("test_menu", [])
    if not isinstance(raw_menu, list):
        raise SchemaViolation("test_menu", "must be a list")
    entries: list[TestEntry] = []
    seen: set[str] = set()
    for i, item in enumerate(raw_menu):
        if not isinstance(item, dict):
            raise SchemaViolation(f"test_menu[{i}]", "must be an object")
        name = item.get("name")
        result = item.get("result")
        if not isinstance(name, str) or not name.strip():
            raise SchemaViolation(f"test_menu[{i}].name", "required non-empty string")
        if not isinstance(result, str) or not result.strip():
            raise SchemaViolation(f"test_menu[{i}].result", "required non-empty string")
        key = normalize(name)
        if key in seen:
            raise DuplicateTest(name)
        seen.add(key)
        entries.append(TestEntry(name=name.strip(), result=result.strip()))

    metadata = payload.get("metadata", {})
    if not isinstance(metadata, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in metadata.items()
    ):
        raise SchemaViolation("metadata", "must map strings to strings")

    gt_tests = payload.get("gt_tests", [])
    if not isinstance(gt_tests, list) or any(not isinstance(t, str) or not t.strip() for t in gt_tests):
        raise SchemaViolation("gt_tests", "must be a list of non-empty strings")

    return ClinicalEnvironment(
        case_id=case_id.strip(),
        initial_observation=observation.strip(),
        ground_truth_diagnosis=ground_truth.strip(),
        test_menu=tuple(entries),
        metadata=dict(metadata),
        gt_tests=tuple(t.strip() for t in gt_tests),
    )


def load_case(path: str | Path) -> ClinicalEnvironment:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaViolation("<file>", f"{path}: invalid JSON ({exc})") from exc
    return validate_case(payload)


def case_to_payload(env: ClinicalEnvironment) -> dict:
    """Canonical dict form with fixed key order (for byte-stable writes)."""
    payload: dict = {
        "case_id": env.case_id,
        "initial_observation": env.initial_observation,
        "ground_truth_diagnosis": env.ground_truth_diagnosis,
        "test_menu": [{"name": e.name, "result": e.result} for e in env.test_menu],
        "metadata": dict(sorted(env.metadata.items())),
    }
    if env.gt_tests:
        payload["gt_tests"] = list(env.gt_tests)
    return payload


class OracleBackend(Protocol):
    def answer(self, env: ClinicalEnvironment, requested: Sequence[str]) -> list[OracleAnswer]: ...


def _match_menu(env: ClinicalEnvironment, name: str, threshold: float) -> TestEntry | None:
    """Best menu entry for a requested name, or None below threshold.

    Normalized-exact match wins outright; otherwise the symmetric
    token-overlap score decides, ties going to the lexicographically
    smallest entry name.
    """
    query = normalize(name)
    if not query:
        return None
    best: TestEntry | None = None
    best_score = 0.0
    for entry in sorted(env.test_menu, key=lambda e: e.name):
        if normalize(entry.name) == query:
            return entry
        score = overlap_score(name, entry.name)
        if score > best_score:
            best, best_score = entry, score
    if best is not None and best_score >= threshold:
        return best
    return None


class DeterministicOracle:
    """Pure fuzzy matching against the documented menu. The default backend."""

    def __init__(self, threshold: float = ORACLE_MATCH_THRESHOLD) -> None:
        self.threshold = threshold

    def answer(self, env: ClinicalEnvironment, requested: Sequence[str]) -> list[OracleAnswer]:
        answers = []
        for name in requested:
            entry = _match_menu(env, name, self.threshold)
            if entry is None:
                answers.append(OracleAnswer(requested_name=name, status=UNAVAILABLE))
            else:
                answers.append(
                    OracleAnswer(
                        requested_name=name,
                        status=AVAILABLE,
                        result=entry.result,
                        matched_entry=entry.name,
                    )
                )
        return answers


def query_oracle(
    env: ClinicalEnvironment,
    requested: Sequence[str],
    backend: OracleBackend | None = None,
) -> list[OracleAnswer]:
    """Answer test requests in request order; idempotent for a fixed env."""
    oracle = backend if backend is not None else DeterministicOracle()
    answers = oracle.answer(env, list(requested))
    if len(answers) != len(requested):
        raise SchemaViolation("<oracle>", "backend returned wrong answer count")
    return answers


class ChatOracle:
    """Opt-in oracle that asks a chat model to report documented findings.

    The prompt shows the case summary and the documented ancillary results;
    the reply is parsed per requested test. Lines whose content mentions
    UNAVAILABLE (or missing lines) become UNAVAILABLE answers; otherwise the
    text after the test name is the result. matched_entry is filled via the
    deterministic matcher when it resolves.
    """

    def __init__(self, backend, model_id: str = "oracle", temperature: float = 0.0) -> None:
        from .gateway import ChatRequest, complete  # local import to avoid a cycle

        self._complete = complete
        self._request_type = ChatRequest
        self._backend = backend
        self._model_id = model_id
        self._temperature = temperature

    def answer(self, env: ClinicalEnvironment, requested: Sequence[str]) -> list[OracleAnswer]:
        from .prompts import render_template

        if not requested:
            return []
        anc = "\n".join(f"- {entry.name}: {entry.result}" for entry in env.test_menu)
        prompt = render_template(
            "oracle",
            full_case_summary=env.initial_observation,
            anc=anc if anc else "(none documented)",
        )
        ask = "Requested tests:\n" + "\n".join(f"- {name}" for name in requested)
        request = self._request_type(
            model_id=self._model_id,
            messages=(("user", prompt + "\n\n" + ask),),
            temperature=self._temperature,
            metadata={"case_id": env.case_id, "branch": "oracle", "turn": "1"},
        )
        reply = self._complete(request, self._backend)
        answers = []
        lowered_lines = [line.strip() for line in reply.splitlines() if line.strip()]
        for name in requested:
            key = normalize(name)
            line = next(
                (ln for ln in lowered_lines if normalize(ln).startswith(key)),
                None,
            )
            if line is None or "UNAVAILABLE" in line:
                answers.append(OracleAnswer(requested_name=name, status=UNAVAILABLE))
                continue
            _prefix, _sep, rest = line.partition(":")
            result = rest.strip() or line.strip()
            entry = _match_menu(env, name, ORACLE_MATCH_THRESHOLD)
            answers.append(
                OracleAnswer(
                    requested_name=name,
                    status=AVAILABLE,
                    result=result,
                    matched_entry=entry.name if entry else None,
                )
            )
        return answers


def extract_case(raw_text: str, backend, *, metadata: dict | None = None) -> ClinicalEnvironment:
    """Turn a raw case report into a validated environment via one chat pass."""
    from .gateway import ChatRequest, complete
    from .prompts import render_template

    request = ChatRequest(
        model_id="extractor",
        messages=(("user", render_template("extract_case", raw_case_text=raw_text)),),
        temperature=0.0,
        metadata=metadata or {},
    )
    reply = complete(request, backend)
    text = reply.strip()
    if text.startswith("```"):
        # tolerate fenced replies: drop the first and last fence lines
        lines = [ln for ln in text.splitlines() if not ln.strip().startswith("```")]
        text = "\n".join(lines)
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation("<extraction>", f"reply is not valid JSON: {exc}") from exc
    return validate_case(payload)
