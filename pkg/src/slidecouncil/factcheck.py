"""External verification: fact checking against references, classifier consensus.

The fact side pulls diagnostic keywords out of a response's claims,
retrieves reference text, and judges each claim against it. The consensus
side extracts the response's stated cancer type and scores its agreement
with a panel of slide classifiers, discounted by how much the panel
agrees with itself.
"""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .backends import (
    BackendDescriptor,
    ChatRequest,
    ClassifierVerdict,
    chat_complete,
    classify,
    default_synonyms,
    first_number,
    load_synonym_table,
    normalize_label,
)
from .consistency import Claim, _clamp_judged, _strip_code_fence
from .core import (
    BackendError,
    EmptyList,
    ExtractionError,
    JudgeError,
    require_unit_interval,
)
from .knowledge import ReferenceSummary

log = logging.getLogger(__name__)

_ABSTAIN = {"none", "unknown", "n/a", "not applicable", "no cancer type", "abstain"}
_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class KeywordSet:
    """Deduplicated, normalized diagnostic keywords driving retrieval."""

    terms: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(set(self.terms)) != len(self.terms):
            raise ValueError("keyword terms must be deduplicated")
        if any(not t for t in self.terms):
            raise ValueError("keyword terms must be nonempty")


@dataclass(frozen=True)
class FactJudgment:
    claim_index: int
    f: float
    justification: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.f <= 1.0:
            raise ValueError("factual score must lie in [0, 1]")


@dataclass(frozen=True)
class ConsensusResult:
    """Everything the consensus check produced for one response."""

    extracted_type: str | None
    verdicts: tuple[ClassifierVerdict, ...]
    agreements: tuple[int, ...]
    phi_a: float
    phi_b: float
    phi_c: float
    applicable: bool

    def to_payload(self) -> dict:
        return {
            "extracted_type": self.extracted_type,
            "verdicts": [
                {"backend_id": v.backend_id, "label": v.label, "confidence": v.confidence}
                for v in self.verdicts
            ],
            "agreements": list(self.agreements),
            "phi_a": self.phi_a,
            "phi_b": self.phi_b,
            "phi_c": self.phi_c,
            "applicable": self.applicable,
        }


NOT_APPLICABLE = ConsensusResult(
    extracted_type=None,
    verdicts=(),
    agreements=(),
    phi_a=0.0,
    phi_b=0.0,
    phi_c=0.0,
    applicable=False,
)


# ---------------------------------------------------------------------------
# Lexicons
# ---------------------------------------------------------------------------

_default_lexicon: dict[str, str] | None = None


def default_lexicon() -> dict[str, str]:
    """The packaged diagnostic-term lexicon (term -> canonical keyword)."""
    global _default_lexicon
    if _default_lexicon is None:
        path = Path(__file__).parent / "data" / "diagnostic_terms.tsv"
        _default_lexicon = load_synonym_table(path)
    return _default_lexicon


def _scan_terms(text: str, vocabulary: Mapping[str, str]) -> list[tuple[int, str]]:
    """All vocabulary terms present in ``text`` as (position, term) matches.

    Matches respect word boundaries; at equal positions the longer term
    wins, so compound names beat their embedded sub-terms.
    """
    lowered = _WS.sub(" ", text.lower())
    found: list[tuple[int, int, str]] = []
    for term in vocabulary:
        for match in re.finditer(rf"(?<![0-9a-z]){re.escape(term)}(?![0-9a-z])", lowered):
            found.append((match.start(), -len(term), term))
    found.sort()
    return [(pos, term) for pos, _, term in found]


# ---------------------------------------------------------------------------
# Keyword extraction and fact scoring
# ---------------------------------------------------------------------------

def extract_keywords(
    claims: list[Claim],
    extractor: BackendDescriptor | None = None,
    lexicon: Mapping[str, str] | None = None,
) -> KeywordSet:
    """Collect the diagnostic keywords mentioned across the claims.

    The fallback path scans claim texts for lexicon terms; an extractor
    backend must reply with a JSON array of strings instead. Keywords are
    normalized and deduplicated preserving first appearance.
    """
    if not claims:
        raise ValueError("need at least one claim")
    if extractor is not None:
        prompt = (
            "List the diagnostic keywords in these pathology findings. Reply with "
            "a JSON array of strings and nothing else.\n\n"
            + "\n".join(c.text for c in claims)
        )
        try:
            reply = chat_complete(extractor, ChatRequest(user_turns=(prompt,)))
        except BackendError as exc:
            raise ExtractionError(f"keyword extractor failed: {exc}", exc.backend_id) from exc
        try:
            raw = json.loads(_strip_code_fence(reply.text))
        except ValueError as exc:
            raise ExtractionError(f"keyword extractor reply is not JSON: {exc}") from exc
        if not isinstance(raw, list) or not all(isinstance(t, str) for t in raw):
            raise ExtractionError("keyword extractor must reply with a JSON string array")
        candidates = [_WS.sub(" ", t.strip().lower()) for t in raw]
    else:
        if lexicon is None:
            lexicon = default_lexicon()
        candidates = []
        for claim in claims:
            candidates.extend(lexicon[term] for _, term in _scan_terms(claim.text, lexicon))
    seen: list[str] = []
    for term in candidates:
        if term and term not in seen:
            seen.append(term)
    return KeywordSet(terms=tuple(seen))


def fact_scores(
    claims: list[Claim],
    reference: ReferenceSummary,
    judge: BackendDescriptor,
    parallelism: int | None = None,
) -> list[FactJudgment]:
    """Judge each claim against the reference text.

    With an empty reference every claim scores the uninformative prior
    0.5: nothing supports it, nothing refutes it. Judge replies are
    clamped to [0, 1].
    """
    if not claims:
        raise ValueError("need at least one claim")
    if reference.empty:
        log.warning("empty reference summary; scoring %d claims at the 0.5 prior", len(claims))
        return [
            FactJudgment(claim_index=c.index, f=0.5, justification="no reference retrieved")
            for c in claims
        ]

    def judge_one(claim: Claim) -> FactJudgment:
        prompt = (
            "Reference knowledge:\n"
            + reference.text
            + "\n\nClaim: "
            + claim.text
            + "\n\nIs the claim consistent with the reference knowledge? Reply with "
            "one number between 0 (contradicts it) and 1 (fully consistent)."
        )
        try:
            reply = chat_complete(judge, ChatRequest(user_turns=(prompt,)))
        except BackendError as exc:
            raise JudgeError(
                f"fact judge failed on claim {claim.index}: {exc}",
                exc.backend_id,
                f"claim {claim.index}",
            ) from exc
        value = _clamp_judged(first_number(reply.text), f"claim {claim.index}", judge.id)
        return FactJudgment(claim_index=claim.index, f=value, justification=reply.text)

    workers = parallelism if parallelism and parallelism > 0 else min(8, len(claims))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(judge_one, claims))


def knowledge_verification(factual_scores: list[float]) -> float:
    """Arithmetic mean of the per-claim factual scores."""
    if not factual_scores:
        raise EmptyList("knowledge_verification needs at least one score")
    for f in factual_scores:
        require_unit_interval(factual_score=f)
    return sum(factual_scores) / len(factual_scores)


# ---------------------------------------------------------------------------
# Cancer-type extraction and classifier consensus
# ---------------------------------------------------------------------------

def extract_cancer_type(
    response_text: str,
    extractor: BackendDescriptor | None = None,
    synonyms: Mapping[str, str] | None = None,
) -> str | None:
    """Pull the cancer type a response commits to, or None if it names none.

    The fallback path returns the first cancer-type vocabulary term in the
    text, normalized through the synonym map. An extractor backend should
    reply with the type name or an abstention such as "none"; short
    off-vocabulary replies are trusted as labels.
    """
    if not response_text.strip():
        raise ValueError("response text must be nonempty")
    if synonyms is None:
        synonyms = default_synonyms()
    if extractor is not None:
        prompt = (
            "Name the cancer type this pathology answer commits to, or reply "
            "'none' if it does not name one. Reply with the type only.\n\n"
            + response_text
        )
        try:
            reply = chat_complete(extractor, ChatRequest(user_turns=(prompt,)))
        except BackendError as exc:
            raise ExtractionError(f"cancer-type extractor failed: {exc}", exc.backend_id) from exc
        answer = _WS.sub(" ", reply.text.strip().strip(".").lower())
        if not answer or answer in _ABSTAIN:
            return None
        matches = _scan_terms(answer, synonyms)
        if matches:
            return normalize_label(matches[0][1], synonyms)
        if len(answer.split()) <= 5:
            return answer
        return None
    matches = _scan_terms(response_text, synonyms)
    if not matches:
        return None
    return normalize_label(matches[0][1], synonyms)


def classify_panel(
    panel: list[BackendDescriptor],
    slide_ref: str,
    synonyms: Mapping[str, str] | None = None,
    parallelism: int | None = None,
) -> list[ClassifierVerdict]:
    """Collect one verdict per panel classifier, concurrently.

    A failing classifier is dropped with a warning so one dead panel
    member degrades the consensus check instead of sinking it. Verdicts
    keep panel order and are never merged.
    """
    if not panel:
        return []

    def ask(backend: BackendDescriptor) -> ClassifierVerdict | None:
        try:
            return classify(backend, slide_ref, synonyms)
        except BackendError as exc:
            log.warning("classifier %s failed on %s: %s", backend.id, slide_ref, exc)
            return None

    workers = parallelism if parallelism and parallelism > 0 else len(panel)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(ask, panel))
    return [v for v in results if v is not None]


def mllm_classifier_agreement(
    extracted_type: str,
    verdicts: list[ClassifierVerdict],
    synonyms: Mapping[str, str] | None = None,
) -> tuple[list[int], float]:
    """Binary agreement between the extracted type and each verdict.

    Returns the per-classifier agreement indicators and their mean.
    """
    if not extracted_type:
        raise ValueError("extracted type must be present")
    if not verdicts:
        raise ValueError("need at least one verdict")
    target = normalize_label(extracted_type, synonyms)
    agreements = [1 if v.label == target else 0 for v in verdicts]
    return agreements, sum(agreements) / len(agreements)


def inter_classifier_agreement(verdicts: list[ClassifierVerdict]) -> float:
    """Fraction of classifier pairs that emitted identical labels.

    A single classifier trivially agrees with itself, so one verdict
    scores 1.0.
    """
    h = len(verdicts)
    if h < 1:
        raise ValueError("need at least one verdict")
    if h == 1:
        return 1.0
    equal_pairs = 0
    for i in range(h):
        for j in range(i + 1, h):
            if verdicts[i].label == verdicts[j].label:
                equal_pairs += 1
    return 2.0 * equal_pairs / (h * (h - 1))


def classifier_verification(phi_a: float, phi_b: float) -> float:
    """Scale the panel agreement by the panel's own consistency."""
    require_unit_interval(phi_a=phi_a, phi_b=phi_b)
    return phi_a * phi_b


def consensus_check(
    response_text: str,
    verdicts: list[ClassifierVerdict],
    extractor: BackendDescriptor | None = None,
    synonyms: Mapping[str, str] | None = None,
) -> ConsensusResult:
    """Run the full consensus scoring for one response.

    Not applicable when the response names no cancer type or the panel
    produced no verdicts; the caller then excludes the classifier score
    and renormalizes the remaining weights.
    """
    extracted = extract_cancer_type(response_text, extractor, synonyms)
    if extracted is None or not verdicts:
        return ConsensusResult(
            extracted_type=extracted,
            verdicts=tuple(verdicts),
            agreements=(),
            phi_a=0.0,
            phi_b=0.0,
            phi_c=0.0,
            applicable=False,
        )
    agreements, phi_a = mllm_classifier_agreement(extracted, verdicts, synonyms)
    phi_b = inter_classifier_agreement(verdicts)
    phi_c = classifier_verification(phi_a, phi_b)
    return ConsensusResult(
        extracted_type=extracted,
        verdicts=tuple(verdicts),
        agreements=tuple(agreements),
        phi_a=phi_a,
        phi_b=phi_b,
        phi_c=phi_c,
        applicable=True,
    )
