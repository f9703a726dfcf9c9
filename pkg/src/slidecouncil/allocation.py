"""Task routing and candidate generation.

A question is first classified into a task type by a deterministic rule
table; an optional router backend covers questions no rule recognizes.
The owning expert role then picks capable models from the zoo and fans
the query out to them concurrently.
"""
from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .backends import BackendDescriptor, ChatRequest, chat_complete
from .core import (
    AllBackendsFailed,
    BackendError,
    ExpertRole,
    NoEligibleModel,
    Query,
    ROLE_FOR_TASK,
    RouterBackendError,
    TaskType,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskAssignment:
    """Routing outcome: the task type, its owning expert, and why."""

    task_type: TaskType
    expert_role: ExpertRole | None
    rationale: str

    def __post_init__(self) -> None:
        expected = ROLE_FOR_TASK.get(self.task_type)
        if self.expert_role is not expected:
            raise ValueError(
                f"{self.task_type.value} is owned by {expected}, not {self.expert_role}"
            )


@dataclass(frozen=True)
class CandidateResponse:
    """One model's answer. A failed dispatch leaves ``text`` empty and
    records the failure in ``error``; such placeholders are skipped by
    verification but keep the candidate list aligned with the model list."""

    model_id: str
    text: str
    task_type: TaskType
    elapsed_ms: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return bool(self.text)


# ---------------------------------------------------------------------------
# Routing rules
# ---------------------------------------------------------------------------

RuleTable = list[tuple[re.Pattern, TaskType]]


def load_rules(path: str | Path) -> RuleTable:
    """Parse a rule file of ``regex<TAB>task`` lines; first match wins."""
    rules: RuleTable = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        pattern, tab, task_name = line.rpartition("\t")
        if not tab or not pattern:
            raise ValueError(f"rule line needs 'regex<TAB>task': {line!r}")
        rules.append((re.compile(pattern, re.IGNORECASE), TaskType.parse(task_name)))
    return rules


_default_rules: RuleTable | None = None


def default_rules() -> RuleTable:
    global _default_rules
    if _default_rules is None:
        _default_rules = load_rules(Path(__file__).parent / "data" / "task_rules.tsv")
    return _default_rules


def _assignment(task_type: TaskType, rationale: str) -> TaskAssignment:
    return TaskAssignment(task_type, ROLE_FOR_TASK.get(task_type), rationale)


def _parse_router_reply(reply: str) -> TaskType | None:
    squashed = "".join(ch for ch in reply.lower() if ch.isalnum())
    members = sorted(TaskType, key=lambda t: -len(t.value))
    for member in members:
        if "".join(ch for ch in member.value.lower() if ch.isalnum()) in squashed:
            return member
    return None


def route_task(
    question: str,
    router_backend: BackendDescriptor | None = None,
    rules: RuleTable | None = None,
) -> TaskAssignment:
    """Classify a question into a task type.

    The rule table is consulted first, which keeps routing a pure function
    of the question when no router backend is configured. Questions no
    rule recognizes go to the router backend when one is given, otherwise
    they are out of scope.
    """
    if not question.strip():
        raise ValueError("question must be nonempty")
    if rules is None:
        rules = default_rules()
    for pattern, task_type in rules:
        if pattern.search(question):
            return _assignment(task_type, f"rule {pattern.pattern!r}")
    if router_backend is not None:
        prompt = (
            "Classify the pathology question below into exactly one task type "
            "from this list: "
            + ", ".join(t.value for t in TaskType)
            + ". Reply with the task type name only.\n\nQuestion: "
            + question
        )
        try:
            reply = chat_complete(router_backend, ChatRequest(user_turns=(prompt,)))
        except BackendError as exc:
            raise RouterBackendError(
                f"router backend failed: {exc}", exc.backend_id, question
            ) from exc
        task_type = _parse_router_reply(reply.text)
        if task_type is not None:
            return _assignment(task_type, f"router backend {router_backend.id}")
        return _assignment(TaskType.OUT_OF_SCOPE, "router reply unrecognized")
    return _assignment(TaskType.OUT_OF_SCOPE, "no rule matched")


# ---------------------------------------------------------------------------
# Model selection and fan-out
# ---------------------------------------------------------------------------

def select_models(
    task_type: TaskType,
    zoo: list[BackendDescriptor],
    m: int | None = None,
) -> list[BackendDescriptor]:
    """Pick up to ``m`` zoo models supporting ``task_type``, in registry order.

    ``m=None`` selects every eligible model.
    """
    if m is not None and m < 1:
        raise ValueError("m must be >= 1")
    eligible = [
        b for b in zoo if b.kind == "chat" and task_type in b.supported_tasks
    ]
    if not eligible:
        raise NoEligibleModel(f"no zoo model supports {task_type.value}")
    return eligible if m is None else eligible[:m]


def generate_candidates(
    query: Query,
    models: list[BackendDescriptor],
    prompt_template: str = "",
    task_type: TaskType | None = None,
    parallelism: int | None = None,
) -> list[CandidateResponse]:
    """Fan the query out to every model concurrently.

    Output order matches input model order regardless of completion order.
    A failing backend becomes a placeholder rather than aborting the run,
    as long as at least one model succeeds.
    """
    if not models:
        raise ValueError("models must be nonempty")
    if task_type is None:
        task_type = TaskType.GLOBAL_MORPH
    turn = f"{prompt_template.strip()}\n\n{query.question}" if prompt_template.strip() else query.question
    req = ChatRequest(user_turns=(turn,), image_ref=query.thumbnail_path)

    def ask(model: BackendDescriptor) -> CandidateResponse:
        started = time.perf_counter()
        try:
            resp = chat_complete(model, req)
        except BackendError as exc:
            log.warning("candidate generation failed on %s: %s", model.id, exc)
            return CandidateResponse(
                model_id=model.id,
                text="",
                task_type=task_type,
                elapsed_ms=max(0, int((time.perf_counter() - started) * 1000)),
                error=f"{type(exc).__name__}: {exc}",
            )
        return CandidateResponse(
            model_id=model.id,
            text=resp.text,
            task_type=task_type,
            elapsed_ms=resp.latency_ms,
        )

    workers = parallelism if parallelism and parallelism > 0 else len(models)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        candidates = list(pool.map(ask, models))
    if not any(c.ok for c in candidates):
        raise AllBackendsFailed(
            "every model failed: " + "; ".join(c.error or "?" for c in candidates)
        )
    return candidates
