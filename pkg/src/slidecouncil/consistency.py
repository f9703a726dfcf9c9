"""Internal consistency checks on a single candidate response.

Claims are pulled out of the response, judged pairwise for whether they
can coexist, and each claim's supporting evidence is judged for validity.
The two resulting scores average into the internal consistency score.
"""
from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backends import BackendDescriptor, ChatRequest, chat_complete, first_number
from .core import (
    BackendError,
    EmptyList,
    ExtractionEmpty,
    JudgeError,
    MalformedExtraction,
    require_unit_interval,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Evidence:
    text: str
    validity: float | None = None

    def __post_init__(self) -> None:
        if self.validity is not None and not 0.0 <= self.validity <= 1.0:
            raise ValueError("validity must lie in [0, 1]")


@dataclass(frozen=True)
class Claim:
    """An atomic assertion extracted from a response, indexed from 1."""

    index: int
    text: str
    evidence: Evidence | None = None

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("claim index starts at 1")
        if not self.text.strip():
            raise ValueError("claim text must be nonempty")


@dataclass(frozen=True)
class CompatibilityMatrix:
    """Upper-triangular pairwise compatibility judgments in [0, 1].

    Entries are keyed by (i, j) with 1 <= i < j <= n; compatibility is
    symmetric so the lower triangle is implied and the diagonal unused.
    """

    n: int
    entries: dict[tuple[int, int], float]

    def __post_init__(self) -> None:
        expected = {(i, j) for i in range(1, self.n + 1) for j in range(i + 1, self.n + 1)}
        if set(self.entries) != expected:
            raise ValueError("matrix entries must cover exactly the pairs i < j")
        for pair, value in self.entries.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"entry {pair} out of [0, 1]: {value}")

    def to_payload(self) -> dict:
        """JSON-safe form for memory logging."""
        return {
            "n": self.n,
            "entries": {f"{i},{j}": v for (i, j), v in sorted(self.entries.items())},
        }


# ---------------------------------------------------------------------------
# Claim extraction
# ---------------------------------------------------------------------------

_SENTENCE_SPLIT = re.compile(r"[.!?]+(?:\s+|$)")


def split_sentences(text: str) -> list[str]:
    parts = [p.strip() for p in _SENTENCE_SPLIT.split(text)]
    return [p for p in parts if p]


def extract_claims(
    response_text: str,
    extractor: BackendDescriptor | None = None,
) -> list[Claim]:
    """Extract the claim list from a response.

    Without an extractor backend each sentence becomes one claim with no
    evidence attached. With one, the backend must reply with a JSON array
    of ``{"claim": str, "evidence": str|null}`` objects which are
    re-indexed from 1.
    """
    if not response_text.strip():
        raise ExtractionEmpty("response is blank")
    if extractor is None:
        sentences = split_sentences(response_text)
        if not sentences:
            raise ExtractionEmpty("no sentences found")
        return [Claim(index=i, text=s) for i, s in enumerate(sentences, start=1)]

    prompt = (
        "Extract the factual claims from the pathology answer below. Reply with a "
        'JSON array of objects {"claim": string, "evidence": string or null} and '
        "nothing else.\n\nAnswer:\n" + response_text
    )
    reply = chat_complete(extractor, ChatRequest(user_turns=(prompt,)))
    try:
        raw = json.loads(_strip_code_fence(reply.text))
    except ValueError as exc:
        raise MalformedExtraction(f"extractor reply is not JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise MalformedExtraction("extractor reply must be a JSON array")
    claims: list[Claim] = []
    for i, item in enumerate(raw, start=1):
        if not isinstance(item, dict) or not isinstance(item.get("claim"), str):
            raise MalformedExtraction(f"bad claim object at position {i}")
        evidence_text = item.get("evidence")
        if evidence_text is not None and not isinstance(evidence_text, str):
            raise MalformedExtraction(f"bad evidence at position {i}")
        evidence = Evidence(text=evidence_text) if evidence_text else None
        if not item["claim"].strip():
            raise MalformedExtraction(f"empty claim text at position {i}")
        claims.append(Claim(index=i, text=item["claim"].strip(), evidence=evidence))
    if not claims:
        raise ExtractionEmpty("extractor returned zero claims")
    return claims


def _strip_code_fence(text: str) -> str:
    stripped = text.strip()
    if stripped.startswith("```"):
        stripped = re.sub(r"^```[a-zA-Z]*\n?", "", stripped)
        stripped = re.sub(r"\n?```$", "", stripped)
    return stripped


# ---------------------------------------------------------------------------
# Judging
# ---------------------------------------------------------------------------

def _clamp_judged(value: float | None, what: str, backend_id: str) -> float:
    if value is None:
        raise JudgeError(f"judge reply carried no number for {what}", backend_id, what)
    if value < 0.0 or value > 1.0:
        log.warning("judge %s returned %s for %s; clamping to [0, 1]", backend_id, value, what)
        return min(1.0, max(0.0, value))
    return value


def judge_compatibility(
    claims: list[Claim],
    judge: BackendDescriptor,
    parallelism: int | None = None,
) -> CompatibilityMatrix:
    """Judge every claim pair for coexistence, one prompt per pair.

    Out-of-range judge replies are clamped and logged rather than
    rejected. Pair judgments run concurrently and are assembled by index,
    so completion order never changes the result.
    """
    if not claims:
        raise ValueError("need at least one claim")
    n = len(claims)
    pairs = [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]

    def judge_pair(pair: tuple[int, int]) -> tuple[tuple[int, int], float]:
        i, j = pair
        prompt = (
            "Can these two statements about the same slide both be true? Reply "
            "with one number between 0 (contradictory) and 1 (fully compatible)."
            f"\n\nStatement A: {claims[i - 1].text}\nStatement B: {claims[j - 1].text}"
        )
        try:
            reply = chat_complete(judge, ChatRequest(user_turns=(prompt,)))
        except BackendError as exc:
            raise JudgeError(
                f"compatibility judge failed on pair {pair}: {exc}",
                exc.backend_id,
                f"pair {pair}",
            ) from exc
        return pair, _clamp_judged(first_number(reply.text), f"pair {pair}", judge.id)

    entries: dict[tuple[int, int], float] = {}
    if pairs:
        workers = parallelism if parallelism and parallelism > 0 else min(8, len(pairs))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for pair, value in pool.map(judge_pair, pairs):
                entries[pair] = value
    return CompatibilityMatrix(n=n, entries=entries)


def compatibility_score(matrix: CompatibilityMatrix) -> float:
    """Mean pairwise compatibility; 1.0 when there are no pairs to contradict."""
    if matrix.n <= 1:
        return 1.0
    pair_count = matrix.n * (matrix.n - 1) // 2
    # fsum: one correctly rounded sum, so relabeling claims cannot move
    # the score by an ulp
    return math.fsum(matrix.entries.values()) / pair_count


def judge_evidence(
    claims: list[Claim],
    judge: BackendDescriptor,
    parallelism: int | None = None,
) -> list[float]:
    """Judge how well each claim's evidence supports it.

    A claim with no attached evidence scores 0.0 without consulting the
    judge: absent support counts as failing to support.
    """
    if not claims:
        raise ValueError("need at least one claim")

    def judge_one(claim: Claim) -> float:
        if claim.evidence is None or not claim.evidence.text.strip():
            return 0.0
        prompt = (
            "Does the evidence support the claim? Reply with one number between "
            "0 (no support) and 1 (fully supported)."
            f"\n\nClaim: {claim.text}\nEvidence: {claim.evidence.text}"
        )
        try:
            reply = chat_complete(judge, ChatRequest(user_turns=(prompt,)))
        except BackendError as exc:
            raise JudgeError(
                f"evidence judge failed on claim {claim.index}: {exc}",
                exc.backend_id,
                f"claim {claim.index}",
            ) from exc
        return _clamp_judged(first_number(reply.text), f"claim {claim.index}", judge.id)

    workers = parallelism if parallelism and parallelism > 0 else min(8, len(claims))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(judge_one, claims))


def validity_score(validities: list[float]) -> float:
    """Arithmetic mean of per-claim evidence validity."""
    if not validities:
        raise EmptyList("validity_score needs at least one value")
    for v in validities:
        require_unit_interval(validity=v)
    return sum(validities) / len(validities)


def internal_consistency(phi_g: float, phi_e: float) -> float:
    """Average the compatibility and validity scores."""
    require_unit_interval(phi_g=phi_g, phi_e=phi_e)
    return (phi_g + phi_e) / 2.0
