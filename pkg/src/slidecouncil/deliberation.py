"""Score aggregation, best-response selection, drafting, and deliberation.

The endgame of a run: fold the three verification scores into a total,
pick the best candidate, pull in aligned material from the others, draft
a summary, then let a council of reasoning agents endorse or revise it
until a strict majority endorses or the round budget runs out.
"""
from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .allocation import CandidateResponse
from .backends import BackendDescriptor, ChatRequest, chat_complete
from .consistency import split_sentences
from .core import (
    AllZeroWeights,
    BackendError,
    NoRecords,
    ScoreBundle,
    SummarizerError,
    WeightConfig,
    normalize_weights,
    require_unit_interval,
)
from .knowledge import tokenize

log = logging.getLogger(__name__)

ALIGNMENT_THRESHOLD = 0.5
DEFAULT_MAX_ROUNDS = 3


class Verdict(enum.Enum):
    ENDORSE = "Endorse"
    REVISE = "Revise"


class Outcome(enum.Enum):
    CONSENSUS = "Consensus"
    EXHAUSTED = "Exhausted"


@dataclass(frozen=True)
class VerificationRecord:
    """One candidate's verification outcome, ready for selection."""

    response_index: int
    scores: ScoreBundle
    phi_total: float
    model_id: str = ""
    logs_ref: str = ""

    def __post_init__(self) -> None:
        if self.response_index < 0:
            raise ValueError("response index must be nonnegative")
        require_unit_interval(phi_total=self.phi_total)


@dataclass(frozen=True)
class Vote:
    """A reasoner's verdict on the current draft.

    ``failed`` marks votes synthesized for unreachable or malformed
    reasoners; only those may carry a Revise verdict with an empty
    suggestion.
    """

    reasoner_id: str
    verdict: Verdict
    suggestion: str = ""
    failed: bool = False

    def __post_init__(self) -> None:
        if self.verdict is Verdict.ENDORSE:
            if self.suggestion or self.failed:
                raise ValueError("an endorsement carries no suggestion and cannot be a failure")
        elif not self.suggestion and not self.failed:
            raise ValueError("a revise vote needs a suggestion unless it marks a failure")


@dataclass
class DeliberationState:
    """Round counter, draft evolution, and votes of one deliberation."""

    round: int = 0
    draft_history: list[str] = field(default_factory=list)
    vote_history: list[list[Vote]] = field(default_factory=list)
    outcome: Outcome | None = None

    def to_payload(self) -> dict:
        return {
            "rounds": self.round,
            "outcome": self.outcome.value if self.outcome else None,
            "drafts": list(self.draft_history),
            "votes": [
                [
                    {
                        "reasoner_id": v.reasoner_id,
                        "verdict": v.verdict.value,
                        "suggestion": v.suggestion,
                        "failed": v.failed,
                    }
                    for v in votes
                ]
                for votes in self.vote_history
            ],
        }


@dataclass(frozen=True)
class FinalAnswer:
    text: str
    best_response_index: int
    phi_total_best: float
    consensus_round: int | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("final answer text must be nonempty")
        if self.best_response_index < 0:
            raise ValueError("best response index must be nonnegative")
        require_unit_interval(phi_total_best=self.phi_total_best)


# ---------------------------------------------------------------------------
# Aggregation and selection
# ---------------------------------------------------------------------------

def total_score(bundle: ScoreBundle, weights: WeightConfig) -> float:
    """Weighted total of the logic, knowledge, and consensus scores.

    Weights are normalized to sum 1. When the consensus score is not
    applicable its weight mass is redistributed proportionally over the
    other two; if those carry no weight the configuration cannot score
    anything and AllZeroWeights is raised.
    """
    if bundle.phi_c_applicable:
        w = normalize_weights(weights)
        return w.w1 * bundle.phi_l + w.w2 * bundle.phi_k + w.w3 * bundle.phi_c
    remaining = weights.w1 + weights.w2
    if remaining == 0.0:
        raise AllZeroWeights(
            "consensus score inapplicable and the logic/knowledge weights are both zero"
        )
    return (weights.w1 * bundle.phi_l + weights.w2 * bundle.phi_k) / remaining


def select_best(records: list[VerificationRecord]) -> int:
    """Index into ``records`` of the best-scoring candidate.

    Ties on the total fall back to higher knowledge score, then higher
    consensus score, then the lower response index.
    """
    if not records:
        raise NoRecords("cannot select a best response from zero records")
    best = 0
    for i in range(1, len(records)):
        challenger, champion = records[i], records[best]
        key_c = (challenger.phi_total, challenger.scores.phi_k, challenger.scores.phi_c)
        key_b = (champion.phi_total, champion.scores.phi_k, champion.scores.phi_c)
        if key_c > key_b:
            best = i
        elif key_c == key_b and challenger.response_index < champion.response_index:
            best = i
    return best


# ---------------------------------------------------------------------------
# Aligned-content extraction and drafting
# ---------------------------------------------------------------------------

def _jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def extract_aligned_content(
    best: CandidateResponse,
    others: list[CandidateResponse],
    judge: BackendDescriptor | None = None,
    threshold: float = ALIGNMENT_THRESHOLD,
) -> list[str]:
    """Snippets from the other candidates that align with the best one.

    The fallback path keeps an other-response sentence when its token
    Jaccard overlap with any best-response sentence reaches the
    threshold. The judge path asks a backend YES/NO per sentence.
    Duplicates of best-response sentences and of earlier snippets are
    dropped; input order is preserved.
    """
    best_sentences = split_sentences(best.text)
    best_tokens = [set(tokenize(s)) for s in best_sentences]
    best_normalized = {" ".join(tokenize(s)) for s in best_sentences}
    snippets: list[str] = []
    seen: set[str] = set(best_normalized)
    for other in others:
        if not other.ok:
            continue
        for sentence in split_sentences(other.text):
            key = " ".join(tokenize(sentence))
            if not key or key in seen:
                continue
            if judge is not None:
                prompt = (
                    "Does the statement align with the findings? Reply YES or NO.\n\n"
                    "Findings:\n" + best.text + "\n\nStatement: " + sentence
                )
                reply = chat_complete(judge, ChatRequest(user_turns=(prompt,)))
                aligned = reply.text.strip().upper().startswith("YES")
            else:
                tokens = set(tokenize(sentence))
                aligned = any(_jaccard(tokens, bt) >= threshold for bt in best_tokens)
            if aligned:
                snippets.append(sentence)
                seen.add(key)
    return snippets


def draft_summary(
    best: CandidateResponse,
    aligned: list[str],
    logs_digest: str = "",
    summarizer: BackendDescriptor | None = None,
) -> str:
    """Initial summary draft from the best response and aligned snippets.

    Without a summarizer backend the draft is the best text, followed by
    the aligned snippets as bullets when there are any. A backend's reply
    is used verbatim.
    """
    if not best.ok:
        raise ValueError("cannot draft from a failed candidate")
    if summarizer is None:
        if not aligned:
            return best.text
        bullets = "\n".join("- " + s for s in aligned)
        return best.text + "\n\nSupporting observations:\n" + bullets
    sections = ["Best response:\n" + best.text]
    if aligned:
        sections.append("Aligned content:\n" + "\n".join("- " + s for s in aligned))
    if logs_digest:
        sections.append("Verification log digest:\n" + logs_digest)
    prompt = (
        "Compose the final pathology answer from the material below. "
        "Reply with the answer only.\n\n" + "\n\n".join(sections)
    )
    try:
        reply = chat_complete(summarizer, ChatRequest(user_turns=(prompt,)))
    except BackendError as exc:
        raise SummarizerError(f"summarizer failed: {exc}", exc.backend_id) from exc
    if not reply.text.strip():
        raise SummarizerError("summarizer returned an empty draft", summarizer.id)
    return reply.text


# ---------------------------------------------------------------------------
# Deliberation
# ---------------------------------------------------------------------------

def _parse_vote(reasoner_id: str, reply_text: str) -> Vote:
    lines = reply_text.strip().splitlines() or [""]
    head = lines[0].strip().upper()
    suggestion = "\n".join(lines[1:]).strip()
    if head.startswith("ENDORSE"):
        return Vote(reasoner_id=reasoner_id, verdict=Verdict.ENDORSE)
    if head.startswith("REVISE"):
        if suggestion:
            return Vote(reasoner_id=reasoner_id, verdict=Verdict.REVISE, suggestion=suggestion)
        return Vote(reasoner_id=reasoner_id, verdict=Verdict.REVISE, failed=True)
    log.warning("reasoner %s sent a malformed vote; counting it as Revise", reasoner_id)
    return Vote(reasoner_id=reasoner_id, verdict=Verdict.REVISE, failed=True)


def _revise_draft(
    draft: str,
    suggestions: list[str],
    summarizer: BackendDescriptor | None,
) -> str:
    if summarizer is None:
        if not suggestions:
            return draft
        notes = "\n".join("- " + s for s in suggestions)
        return draft + "\n\nRevision notes:\n" + notes
    prompt = (
        "Revise the draft to address the reviewers' suggestions. "
        "Reply with the revised draft only.\n\nDraft:\n" + draft
        + "\n\nSuggestions:\n" + "\n".join("- " + s for s in suggestions)
    )
    try:
        reply = chat_complete(summarizer, ChatRequest(user_turns=(prompt,)))
    except BackendError as exc:
        raise SummarizerError(f"summarizer failed during revision: {exc}", exc.backend_id) from exc
    if not reply.text.strip():
        raise SummarizerError("summarizer returned an empty revision", summarizer.id)
    return reply.text


def deliberate(
    initial_draft: str,
    reasoners: list[BackendDescriptor],
    best_response_index: int,
    phi_total_best: float,
    r_max: int = DEFAULT_MAX_ROUNDS,
    summarizer: BackendDescriptor | None = None,
    logs_digest: str = "",
    parallelism: int | None = None,
) -> tuple[FinalAnswer, DeliberationState]:
    """Run the endorse-or-revise protocol to a strict-majority consensus.

    Each round every reasoner votes on the current draft concurrently.
    Endorsements strictly exceeding half the council end the round with
    Consensus; otherwise the draft is revised from the concatenated
    suggestions and the next round begins. After ``r_max`` rounds without
    consensus the latest draft is returned with outcome Exhausted. A
    reasoner that fails or votes out of contract counts as a suggestionless
    Revise.
    """
    if not initial_draft.strip():
        raise ValueError("initial draft must be nonempty")
    if not reasoners:
        raise ValueError("need at least one reasoner")
    if r_max < 1:
        raise ValueError("need at least one round")
    state = DeliberationState(draft_history=[initial_draft])
    draft = initial_draft
    workers = parallelism if parallelism and parallelism > 0 else len(reasoners)
    for round_no in range(1, r_max + 1):
        state.round = round_no

        def ask(backend: BackendDescriptor) -> Vote:
            prompt = (
                f"Round {round_no} of {r_max}. Review this draft pathology answer.\n\n"
                "Draft:\n" + draft
                + (("\n\nVerification log digest:\n" + logs_digest) if logs_digest else "")
                + "\n\nReply ENDORSE or REVISE on the first line; if revising, give "
                "your suggestion on the following lines."
            )
            try:
                reply = chat_complete(backend, ChatRequest(user_turns=(prompt,)))
            except BackendError as exc:
                log.warning("reasoner %s failed in round %d: %s", backend.id, round_no, exc)
                return Vote(reasoner_id=backend.id, verdict=Verdict.REVISE, failed=True)
            return _parse_vote(backend.id, reply.text)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            votes = list(pool.map(ask, reasoners))
        state.vote_history.append(votes)
        endorsements = sum(1 for v in votes if v.verdict is Verdict.ENDORSE)
        if endorsements > len(reasoners) / 2:
            state.outcome = Outcome.CONSENSUS
            answer = FinalAnswer(
                text=draft,
                best_response_index=best_response_index,
                phi_total_best=phi_total_best,
                consensus_round=round_no,
            )
            return answer, state
        if round_no < r_max:
            suggestions = [v.suggestion for v in votes if v.suggestion]
            draft = _revise_draft(draft, suggestions, summarizer)
            if draft != state.draft_history[-1]:
                state.draft_history.append(draft)
    state.outcome = Outcome.EXHAUSTED
    answer = FinalAnswer(
        text=draft,
        best_response_index=best_response_index,
        phi_total_best=phi_total_best,
        consensus_round=None,
    )
    return answer, state


def final_answer_payload(
    answer: FinalAnswer,
    scores: ScoreBundle,
    state: DeliberationState | None,
) -> dict:
    """The emitted shape of a finished run's answer."""
    payload = {
        "answer": answer.text,
        "best_index": answer.best_response_index,
        "scores": dict(scores.as_dict(), phi_total=answer.phi_total_best),
        "deliberation": None,
    }
    if state is not None:
        payload["deliberation"] = {
            "rounds": state.round,
            "outcome": state.outcome.value if state.outcome else None,
        }
    return payload
