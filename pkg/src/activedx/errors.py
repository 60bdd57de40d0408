"""Typed errors raised across the pipeline.

Every error carries its identifying payload as an attribute so callers can
branch on structure instead of parsing messages.
"""

from __future__ import annotations


class ActiveDxError(Exception):
    """Base class for all pipeline errors."""


# --- knowledge graph -------------------------------------------------------


class MalformedLine(ActiveDxError):
    def __init__(self, line_no: int, detail: str = "") -> None:
        self.line_no = line_no
        self.detail = detail
        super().__init__(f"malformed line {line_no}" + (f": {detail}" if detail else ""))


class DanglingEdge(ActiveDxError):
    def __init__(self, node_id: str) -> None:
        self.node_id = node_id
        super().__init__(f"edge references unknown node {node_id!r}")


class UnknownNode(ActiveDxError):
    def __init__(self, node_id: str) -> None:
        self.node_id = node_id
        super().__init__(f"unknown node {node_id!r}")


# --- clinical environment --------------------------------------------------


class SchemaViolation(ActiveDxError):
    def __init__(self, field: str, detail: str = "") -> None:
        self.field = field
        self.detail = detail
        super().__init__(f"case schema violation at {field!r}" + (f": {detail}" if detail else ""))


class DuplicateTest(ActiveDxError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"duplicate test name after normalization: {name!r}")


# --- agent protocol --------------------------------------------------------


class ReplyParseError(ActiveDxError):
    """Base for structured-reply parse failures."""


class MissingSection(ReplyParseError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"missing section {name!r}")


class EmptySection(ReplyParseError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"empty section {name!r}")


class AmbiguousStatus(ReplyParseError):
    def __init__(self, detail: str = "") -> None:
        self.detail = detail
        super().__init__("no DONE/CONTINUE token in Diagnostic Status" + (f": {detail}" if detail else ""))


class ExtractionParseError(ActiveDxError):
    def __init__(self, detail: str = "") -> None:
        self.detail = detail
        super().__init__(f"test-extraction reply was not a JSON string array: {detail}")


# --- model gateway ---------------------------------------------------------

GATEWAY_ERROR_KINDS = ("auth", "rate_limited_exhausted", "malformed_response", "network")


class GatewayError(ActiveDxError):
    def __init__(self, kind: str, detail: str = "") -> None:
        if kind not in GATEWAY_ERROR_KINDS:
            raise ValueError(f"unknown gateway error kind {kind!r}")
        self.kind = kind
        self.detail = detail
        super().__init__(f"gateway failure ({kind})" + (f": {detail}" if detail else ""))


class ScriptMiss(ActiveDxError):
    def __init__(self, key: str) -> None:
        self.key = key
        super().__init__(f"no scripted reply for {key}")


# --- rollout engine --------------------------------------------------------


class EmptyTree(ActiveDxError):
    def __init__(self, case_id: str) -> None:
        self.case_id = case_id
        super().__init__(f"every root path failed for case {case_id!r}")


# --- trajectory filter -----------------------------------------------------


class GroundTruthUnlinkable(ActiveDxError):
    def __init__(self, case_id: str) -> None:
        self.case_id = case_id
        super().__init__(f"ground-truth diagnosis of case {case_id!r} does not link to the disease graph")


# --- dataset emitter -------------------------------------------------------


class RenderMismatch(ActiveDxError):
    def __init__(self, detail: str = "") -> None:
        self.detail = detail
        super().__init__(f"stored reply no longer parses; store is corrupt: {detail}")


# --- evaluation ------------------------------------------------------------


class JudgeParseError(ActiveDxError):
    def __init__(self, detail: str = "") -> None:
        self.detail = detail
        super().__init__(f"judge/matcher reply was not the expected JSON shape: {detail}")
