"""Clients for external model services plus deterministic scripted mocks.

Two backend kinds exist: chat-completion generators and slide classifiers.
Both are addressed through an immutable :class:`BackendDescriptor`. Real
services speak a JSON-over-HTTP protocol; mocks reply from a script table,
either inline or loaded from a JSON file, so the whole pipeline can run
offline and bit-reproducibly.
"""
from __future__ import annotations

import base64
import json
import logging
import os
import random
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import httpx

from .core import (
    EmptyScript,
    Exhausted,
    ProtocolError,
    TaskType,
    Timeout,
    UnknownSlide,
)

log = logging.getLogger(__name__)

TOKEN_ENV_VAR = "SLIDECOUNCIL_TOKEN"

# Backoff between retry attempts: exponential with +-20% jitter.
BACKOFF_BASE_MS = 200
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER = 0.2

# Every routable task; scripted mocks default to supporting all of them.
ALL_TASKS = frozenset(t for t in TaskType if t is not TaskType.OUT_OF_SCOPE)


# ---------------------------------------------------------------------------
# Wire types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion call: a system prompt, user turns, optional image."""

    user_turns: tuple[str, ...]
    system_prompt: str = ""
    image_ref: str | None = None
    max_tokens: int = 1024
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.user_turns:
            raise ValueError("a chat request needs at least one user turn")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    backend_id: str
    latency_ms: int = 0

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be nonnegative")


@dataclass(frozen=True)
class ClassifierVerdict:
    """One classifier's label for a slide, already normalized."""

    backend_id: str
    label: str
    confidence: float | None = None

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("verdict label must be nonempty")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class BackendDescriptor:
    """Addressing and policy for one backend.

    ``endpoint`` is an ``http(s)://`` URL, a path to a JSON script file,
    or a ``builtin:`` scheme handled in-process. An inline ``script``
    mapping takes precedence over the endpoint, which lets tests build
    fully offline backends without touching disk.
    """

    id: str
    kind: str = "chat"
    endpoint: str = ""
    supported_tasks: frozenset[TaskType] = ALL_TASKS
    timeout_ms: int = 30_000
    max_retries: int = 2
    script: Mapping[str, object] | None = field(default=None, hash=False)

    def __post_init__(self) -> None:
        if self.kind not in ("chat", "classifier"):
            raise ValueError(f"backend kind must be chat or classifier, got {self.kind!r}")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be nonnegative")


def make_scripted_backend(
    script: Mapping[str, object],
    *,
    id: str = "scripted",
    kind: str = "chat",
    supported_tasks: frozenset[TaskType] = ALL_TASKS,
    max_retries: int = 0,
) -> BackendDescriptor:
    """Build a deterministic offline backend replying from ``script``.

    Chat scripts map a request key to a reply: the last user turn is tried
    exactly, then any key contained in the joined user text (longest key
    wins, ties broken lexicographically), then the ``"*"`` catch-all.
    Classifier scripts map slide refs to labels. A reply may also be the
    object ``{"error": "timeout"}`` or ``{"error": "protocol"}`` to force
    that failure mode.
    """
    if not script:
        raise EmptyScript("a scripted backend needs at least one entry")
    return BackendDescriptor(
        id=id,
        kind=kind,
        endpoint="script:inline",
        supported_tasks=supported_tasks,
        timeout_ms=1_000,
        max_retries=max_retries,
        script=dict(script),
    )


# ---------------------------------------------------------------------------
# Label normalization
# ---------------------------------------------------------------------------

_WS = re.compile(r"\s+")


def _base_normalize(label: str) -> str:
    return _WS.sub(" ", label.strip().lower())


def load_synonym_table(path: str | Path) -> dict[str, str]:
    """Load a ``term<TAB>canonical`` table, resolving chains to fixed points."""
    table: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        term, _, canonical = line.partition("\t")
        table[_base_normalize(term)] = _base_normalize(canonical or term)
    # Resolve transitive mappings so normalization is idempotent.
    for term in list(table):
        seen = {term}
        target = table[term]
        while target in table and table[target] != target and target not in seen:
            seen.add(target)
            target = table[target]
        table[term] = target
    return table


_default_synonyms: dict[str, str] | None = None


def default_synonyms() -> dict[str, str]:
    global _default_synonyms
    if _default_synonyms is None:
        path = Path(__file__).parent / "data" / "cancer_synonyms.tsv"
        _default_synonyms = load_synonym_table(path)
    return _default_synonyms


def normalize_label(label: str, synonyms: Mapping[str, str] | None = None) -> str:
    """Lowercase, trim, collapse whitespace, then apply the synonym map."""
    if synonyms is None:
        synonyms = default_synonyms()
    base = _base_normalize(label)
    return synonyms.get(base, base)


def first_number(text: str) -> float | None:
    """Return the first parseable real in ``text``, or None.

    This is the judge reply contract: any reply carrying a number is
    accepted, the first number wins.
    """
    match = re.search(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?", text)
    return float(match.group()) if match else None


# ---------------------------------------------------------------------------
# Script handling
# ---------------------------------------------------------------------------

_file_script_cache: dict[str, dict] = {}


def _load_file_script(path: str) -> dict:
    key = str(Path(path).resolve())
    if key not in _file_script_cache:
        with open(key, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict) or not data:
            raise EmptyScript(f"script file {path} must hold a nonempty JSON object")
        _file_script_cache[key] = data
    return _file_script_cache[key]


def _resolve_script(backend: BackendDescriptor) -> Mapping[str, object] | None:
    if backend.script is not None:
        return backend.script
    if backend.endpoint.endswith(".json"):
        return _load_file_script(backend.endpoint)
    return None


def _interpret_reply(backend: BackendDescriptor, reply: object) -> str:
    if isinstance(reply, str):
        return reply
    if isinstance(reply, dict):
        if reply.get("error") == "timeout":
            raise Timeout(f"scripted timeout from {backend.id}", backend.id)
        if reply.get("error") == "protocol":
            raise ProtocolError(f"scripted protocol error from {backend.id}", backend.id)
        if isinstance(reply.get("text"), str):
            return reply["text"]
    raise ProtocolError(f"unusable scripted reply from {backend.id}: {reply!r}", backend.id)


def _script_chat_reply(backend: BackendDescriptor, script: Mapping[str, object], req: ChatRequest) -> str:
    last = req.user_turns[-1]
    if last in script:
        return _interpret_reply(backend, script[last])
    joined = "\n".join(req.user_turns)
    hits = [k for k in script if k not in ("", "*") and k in joined]
    if hits:
        best = sorted(hits, key=lambda k: (-len(k), k))[0]
        return _interpret_reply(backend, script[best])
    if "*" in script:
        return _interpret_reply(backend, script["*"])
    raise ProtocolError(
        f"backend {backend.id} has no scripted reply for {last!r}", backend.id
    )


# ---------------------------------------------------------------------------
# Builtin backends
# ---------------------------------------------------------------------------

_CLAIM_RE = re.compile(r"CLAIM:\s*(.*?)(?:\n\s*\n|\Z)", re.DOTALL)
_ANSWER_RE = re.compile(r"ANSWER:\s*(.*)\Z", re.DOTALL)


def substring_judge_reply(prompt: str) -> str:
    """Score 1 when the CLAIM section appears verbatim inside ANSWER, else 0.

    Matching ignores case and collapses whitespace. Used as the
    ``builtin:substring-judge`` backend for offline benchmark scoring.
    """
    claim_m = _CLAIM_RE.search(prompt)
    answer_m = _ANSWER_RE.search(prompt)
    if not claim_m or not answer_m:
        return "0"
    claim = _base_normalize(claim_m.group(1))
    answer = _base_normalize(answer_m.group(1))
    return "1" if claim and claim in answer else "0"


def make_substring_judge(id: str = "substring-judge") -> BackendDescriptor:
    return BackendDescriptor(id=id, kind="chat", endpoint="builtin:substring-judge")


_BUILTINS = {"builtin:substring-judge": substring_judge_reply}


# ---------------------------------------------------------------------------
# HTTP transport
# ---------------------------------------------------------------------------

def _auth_headers() -> dict[str, str]:
    token = os.environ.get(TOKEN_ENV_VAR)
    return {"Authorization": f"Bearer {token}"} if token else {}


def _encode_image(path: str) -> str:
    return base64.b64encode(Path(path).read_bytes()).decode("ascii")


def _chat_payload(backend: BackendDescriptor, req: ChatRequest) -> dict:
    messages: list[dict] = []
    if req.system_prompt:
        messages.append({"role": "system", "content": req.system_prompt})
    for i, turn in enumerate(req.user_turns):
        if i == 0 and req.image_ref:
            content: object = [
                {"type": "text", "text": turn},
                {"type": "image_base64", "data": _encode_image(req.image_ref)},
            ]
        else:
            content = turn
        messages.append({"role": "user", "content": content})
    return {
        "model": backend.id,
        "messages": messages,
        "max_tokens": req.max_tokens,
        "temperature": req.temperature,
    }


class _TransientFailure(Exception):
    """Internal marker for retryable non-timeout failures."""


def _http_post(backend: BackendDescriptor, payload: dict) -> dict:
    try:
        resp = httpx.post(
            backend.endpoint,
            json=payload,
            timeout=backend.timeout_ms / 1000.0,
            headers=_auth_headers(),
        )
    except httpx.TimeoutException as exc:
        raise Timeout(f"backend {backend.id} timed out: {exc}", backend.id) from exc
    except httpx.TransportError as exc:
        raise _TransientFailure(str(exc)) from exc
    if resp.status_code >= 500:
        raise _TransientFailure(f"server error {resp.status_code}")
    if resp.status_code >= 400:
        raise ProtocolError(
            f"backend {backend.id} rejected the request: {resp.status_code}", backend.id
        )
    try:
        body = resp.json()
    except ValueError as exc:
        raise ProtocolError(f"backend {backend.id} sent non-JSON reply", backend.id) from exc
    if not isinstance(body, dict):
        raise ProtocolError(f"backend {backend.id} sent a non-object reply", backend.id)
    return body


# ---------------------------------------------------------------------------
# Retry loop
# ---------------------------------------------------------------------------

def _with_retries(backend: BackendDescriptor, attempt):
    delay_s = BACKOFF_BASE_MS / 1000.0
    failure: Exception | None = None
    for n in range(backend.max_retries + 1):
        try:
            return attempt()
        except Timeout as exc:
            failure = exc
        except _TransientFailure as exc:
            failure = exc
        if n < backend.max_retries:
            time.sleep(delay_s * random.uniform(1 - BACKOFF_JITTER, 1 + BACKOFF_JITTER))
            delay_s *= BACKOFF_FACTOR
    if isinstance(failure, Timeout):
        raise failure
    raise Exhausted(
        f"backend {backend.id} failed after {backend.max_retries} retries: {failure}",
        backend.id,
    )


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def chat_complete(backend: BackendDescriptor, req: ChatRequest) -> ChatResponse:
    """Send one chat request and return the backend's text reply.

    Transient failures (timeouts, connection errors, 5xx) are retried up
    to ``backend.max_retries`` with exponential backoff; protocol errors
    are not retried.
    """
    if backend.kind != "chat":
        raise ProtocolError(f"backend {backend.id} is not a chat backend", backend.id)
    started = time.perf_counter()

    script = _resolve_script(backend)

    def attempt() -> str:
        if script is not None:
            return _script_chat_reply(backend, script, req)
        if backend.endpoint in _BUILTINS:
            return _BUILTINS[backend.endpoint]("\n".join(req.user_turns))
        body = _http_post(backend, _chat_payload(backend, req))
        text = body.get("text")
        if not isinstance(text, str):
            raise ProtocolError(f"backend {backend.id} reply lacks a text field", backend.id)
        return text

    text = _with_retries(backend, attempt)
    latency_ms = max(0, int((time.perf_counter() - started) * 1000))
    return ChatResponse(text=text, backend_id=backend.id, latency_ms=latency_ms)


def classify(
    backend: BackendDescriptor,
    slide_ref: str,
    synonyms: Mapping[str, str] | None = None,
) -> ClassifierVerdict:
    """Ask a classifier backend for the slide's cancer-type label."""
    if backend.kind != "classifier":
        raise ProtocolError(f"backend {backend.id} is not a classifier", backend.id)

    script = _resolve_script(backend)

    def attempt() -> tuple[str, float | None]:
        if script is not None:
            if slide_ref in script:
                reply = script[slide_ref]
            elif "*" in script:
                reply = script["*"]
            else:
                raise UnknownSlide(
                    f"classifier {backend.id} has no entry for {slide_ref!r}", backend.id
                )
            if isinstance(reply, dict) and "label" in reply:
                return str(reply["label"]), reply.get("confidence")
            return _interpret_reply(backend, reply), None
        body = _http_post(backend, {"slide_ref": slide_ref})
        if body.get("error") == "unknown_slide":
            raise UnknownSlide(
                f"classifier {backend.id} does not know {slide_ref!r}", backend.id
            )
        label = body.get("label")
        if not isinstance(label, str) or not label.strip():
            raise ProtocolError(f"classifier {backend.id} reply lacks a label", backend.id)
        return label, body.get("confidence")

    label, confidence = _with_retries(backend, attempt)
    return ClassifierVerdict(
        backend_id=backend.id,
        label=normalize_label(label, synonyms),
        confidence=confidence,
    )
