"""Chat-completion access for teachers, oracles, extractors, and judges.

One wire shape everywhere: JSON chat-completions with a ``messages`` list in
and ``choices[0].message.content`` out. Transient failures (429, 5xx,
timeouts) retry with seeded-jitter exponential backoff; auth and malformed
responses surface immediately. Prompt content never appears in logs above
DEBUG level.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import requests

from .errors import GatewayError, ScriptMiss

logger = logging.getLogger(__name__)

ENV_API_BASE = "MEDACTION_API_BASE"
ENV_API_KEY = "MEDACTION_API_KEY"

DEFAULT_TEMPERATURE = 0.6
DEFAULT_MAX_OUTPUT_TOKENS = 5500
DEFAULT_MAX_IN_FLIGHT = 4


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    seed: int | None = None
    # Routing hints for scripted backends (case_id/branch/turn); HTTP
    # backends ignore this entirely.
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0][0] not in ("system", "user"):
            raise ValueError("first message role must be system or user")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be within [0, 2]")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class TeacherSpec:
    label: str
    endpoint: str = ""  # falls back to MEDACTION_API_BASE
    model_id: str = ""
    auth_env: str = ENV_API_KEY
    script: str = ""  # path to a reply script; set for offline teachers


@dataclass
class RetryPolicy:
    base_delay: float = 1.0
    factor: float = 2.0
    max_delay: float = 60.0
    max_attempts: int = 6
    seed: int = 0
    sleeper: Callable[[float], None] = time.sleep

    def delay_for(self, attempt: int, rng: random.Random) -> float:
        # attempt is 1-based; jitter scales the capped exponential delay.
        raw = min(self.max_delay, self.base_delay * self.factor ** (attempt - 1))
        return raw * (0.5 + rng.random() * 0.5)


class TransientBackendFailure(Exception):
    """Internal: retryable failure (429/5xx/timeout/connection)."""

    def __init__(self, kind: str, detail: str = "") -> None:
        self.kind = kind  # "rate_limited" | "network"
        self.detail = detail
        super().__init__(detail or kind)


class ChatBackend(Protocol):
    def send(self, request: ChatRequest) -> str: ...


class HttpChatBackend:
    """POSTs to ``{base}/chat/completions`` with bounded in-flight requests."""

    def __init__(
        self,
        endpoint: str | None = None,
        auth_env: str = ENV_API_KEY,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ) -> None:
        base = endpoint or os.environ.get(ENV_API_BASE, "")
        if not base:
            raise GatewayError("auth", f"no endpoint given and {ENV_API_BASE} unset")
        self.endpoint = base.rstrip("/")
        self.auth_env = auth_env
        self.timeout = timeout
        self._session = session or requests.Session()
        self._limiter = threading.Semaphore(max_in_flight)

    def send(self, request: ChatRequest) -> str:
        payload: dict = {
            "model": request.model_id,
            "messages": [{"role": role, "content": content} for role, content in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        headers = {}
        key = os.environ.get(self.auth_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        logger.debug("POST %s/chat/completions payload=%s", self.endpoint, json.dumps(payload))
        with self._limiter:
            try:
                response = self._session.post(
                    f"{self.endpoint}/chat/completions",
                    json=payload,
                    headers=headers,
                    timeout=self.timeout,
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                raise TransientBackendFailure("network", str(exc)) from exc
        if response.status_code in (401, 403):
            raise GatewayError("auth", f"HTTP {response.status_code}")
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendFailure("rate_limited", f"HTTP {response.status_code}")
        if response.status_code != 200:
            raise GatewayError("malformed_response", f"HTTP {response.status_code}")
        try:
            body = response.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GatewayError("malformed_response", str(exc)) from exc
        if not isinstance(content, str):
            raise GatewayError("malformed_response", "content is not a string")
        return content


class ScriptedChatBackend:
    """Offline replies keyed by (case_id, branch, turn) from request metadata.

    The script table is ``{case_id: {branch: {turn: reply}}}``; ``"*"`` is
    accepted as a wildcard at the branch and turn levels so one reply can
    serve several paths.
    """

    def __init__(self, table: dict) -> None:
        self.table = table

    def send(self, request: ChatRequest) -> str:
        case_id = str(request.metadata.get("case_id", ""))
        branch = str(request.metadata.get("branch", ""))
        turn = str(request.metadata.get("turn", ""))
        key = f"{case_id}|{branch}|{turn}"
        by_case = self.table.get(case_id)
        if by_case is None:
            raise ScriptMiss(key)
        by_branch = by_case.get(branch, by_case.get("*"))
        if by_branch is None:
            raise ScriptMiss(key)
        reply = by_branch.get(turn, by_branch.get("*"))
        if reply is None:
            raise ScriptMiss(key)
        logger.debug("scripted reply for %s (%d chars)", key, len(reply))
        return reply


def scripted_agent(script: str | Path | dict) -> ScriptedChatBackend:
    """Build a scripted backend from a JSON file path or an in-memory table."""
    if isinstance(script, dict):
        return ScriptedChatBackend(script)
    with open(script, encoding="utf-8") as fh:
        return ScriptedChatBackend(json.load(fh))


def backend_from_spec(spec: TeacherSpec) -> ChatBackend:
    if spec.script:
        return scripted_agent(spec.script)
    return HttpChatBackend(endpoint=spec.endpoint or None, auth_env=spec.auth_env or ENV_API_KEY)


def teacher_spec_from_dict(payload: dict) -> TeacherSpec:
    return TeacherSpec(
        label=str(payload.get("label", "teacher")),
        endpoint=str(payload.get("endpoint", "")),
        model_id=str(payload.get("model_id", "")),
        auth_env=str(payload.get("auth_env", ENV_API_KEY)),
        script=str(payload.get("script", "")),
    )


def complete(request: ChatRequest, backend: ChatBackend, policy: RetryPolicy | None = None) -> str:
    """Send one request, retrying transient failures with seeded backoff.

    Retries re-send the identical request (same sampling parameters). After
    max_attempts the last transient kind maps to rate_limited_exhausted or
    network.
    """
    policy = policy or RetryPolicy()
    rng = random.Random(policy.seed)
    last: TransientBackendFailure | None = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            reply = backend.send(request)
            logger.debug("gateway reply (%d chars)", len(reply))
            return reply
        except TransientBackendFailure as exc:
            last = exc
            logger.info(
                "transient gateway failure (attempt %d/%d, kind=%s)",
                attempt,
                policy.max_attempts,
                exc.kind,
            )
            if attempt < policy.max_attempts:
                policy.sleeper(policy.delay_for(attempt, rng))
    assert last is not None
    kind = "rate_limited_exhausted" if last.kind == "rate_limited" else "network"
    raise GatewayError(kind, last.detail)
