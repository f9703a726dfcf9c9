"""Shared domain types, verification-weight handling, and the error taxonomy.

Everything here is an immutable value object, safe to pass between
concurrent pipeline stages.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

ABS_TOL = 1e-12


# ---------------------------------------------------------------------------
# Error taxonomy
# ---------------------------------------------------------------------------

class CouncilError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CouncilError):
    """Invalid or inconsistent configuration."""


class AllZeroWeights(ConfigError):
    """Every verification weight is zero; the total score is undefined."""


class OutOfRangeInput(CouncilError):
    """A score argument fell outside [0, 1]."""


class BadThumbnail(CouncilError):
    """Thumbnail missing, undecodable, or larger than the allowed raster."""


class BackendError(CouncilError):
    """Base for failures while talking to an external model backend."""

    def __init__(self, message: str, backend_id: str = ""):
        super().__init__(message)
        self.backend_id = backend_id


class Timeout(BackendError):
    """The backend did not reply within its deadline, retries included."""


class ProtocolError(BackendError):
    """The backend replied with something the wire contract forbids."""


class Exhausted(BackendError):
    """Retries were spent on transient failures other than timeouts."""


class UnknownSlide(BackendError):
    """A classifier backend has no result for the requested slide."""


class EmptyScript(CouncilError):
    """A scripted mock backend needs at least one scripted reply."""


class RouterBackendError(BackendError):
    """The routing backend failed; carries the question being routed."""

    def __init__(self, message: str, backend_id: str = "", question: str = ""):
        super().__init__(message, backend_id)
        self.question = question


class NoEligibleModel(CouncilError):
    """No model in the zoo supports the routed task type."""


class AllBackendsFailed(CouncilError):
    """Every fanned-out generation attempt failed."""


class ExtractionEmpty(CouncilError):
    """Claim extraction produced zero claims."""


class MalformedExtraction(CouncilError):
    """A model extractor returned JSON that does not match the contract."""


class ExtractionError(BackendError):
    """A keyword or cancer-type extractor backend failed."""


class JudgeError(BackendError):
    """A judge backend failed; carries context about what was judged."""

    def __init__(self, message: str, backend_id: str = "", context: str = ""):
        super().__init__(message, backend_id)
        self.context = context


class EmptyList(CouncilError):
    """An aggregate over claims was asked for with no claims."""


class BadChunkConfig(CouncilError):
    """Chunk size and overlap must satisfy 0 <= overlap < chunk_size."""


class EmptyCorpus(CouncilError):
    """Index construction needs at least one chunk."""


class SummarizerError(BackendError):
    """The summarizing backend failed."""


class ReasonerError(BackendError):
    """A reasoning backend failed during deliberation."""


class NoRecords(CouncilError):
    """Best-response selection needs at least one verification record."""


class StorageFull(CouncilError):
    """The memory store could not accept another entry."""


class SerializationError(CouncilError):
    """A log payload could not be serialized to JSON."""


class CorruptLine(CouncilError):
    """A persisted log file has a malformed line."""

    def __init__(self, line_no: int, message: str = ""):
        super().__init__(message or f"corrupt log line {line_no}")
        self.line_no = line_no


class NonFiniteValue(CouncilError):
    """An attention map contains NaN or infinite values."""


class BadGrid(CouncilError):
    """A target grid must have at least one row and one column."""


class EmptyMapList(CouncilError):
    """Fusion needs at least one attention map."""


class BenchFileError(CouncilError):
    """A benchmark case file violates its schema."""


# ---------------------------------------------------------------------------
# Task vocabulary
# ---------------------------------------------------------------------------

class TaskType(Enum):
    """The routable question categories, plus a terminal out-of-scope bucket."""

    GLOBAL_MORPH = "GlobalMorph"
    KEY_DIAGNOSTIC = "KeyDiagnostic"
    REGIONAL_STRUCTURE = "RegionalStructure"
    SPECIFIC_FEATURE = "SpecificFeature"
    HISTOLOGICAL_TYPING = "HistologicalTyping"
    GRADING = "Grading"
    MOLECULAR_SUBTYPING = "MolecularSubtyping"
    STAGING = "Staging"
    TREATMENT_RECOMMENDATION = "TreatmentRecommendation"
    PROGNOSIS = "Prognosis"
    REPORT_GENERATION = "ReportGeneration"
    OUT_OF_SCOPE = "OutOfScope"

    @classmethod
    def parse(cls, text: str) -> "TaskType":
        """Parse a task-type name, tolerating case and underscore/space noise."""
        wanted = "".join(ch for ch in text.lower() if ch.isalnum())
        for member in cls:
            if "".join(ch for ch in member.value.lower() if ch.isalnum()) == wanted:
                return member
        raise ValueError(f"unknown task type: {text!r}")


class ExpertRole(Enum):
    """The four expert groups that own the routable task types."""

    MORPHOLOGY = "Morphology"
    DIAGNOSIS = "Diagnosis"
    TREATMENT_PLANNING = "TreatmentPlanning"
    REPORT_GENERATION = "ReportGeneration"


# Fixed ownership of task types by expert role.
ROLE_FOR_TASK: dict[TaskType, ExpertRole] = {
    TaskType.GLOBAL_MORPH: ExpertRole.MORPHOLOGY,
    TaskType.KEY_DIAGNOSTIC: ExpertRole.MORPHOLOGY,
    TaskType.REGIONAL_STRUCTURE: ExpertRole.MORPHOLOGY,
    TaskType.SPECIFIC_FEATURE: ExpertRole.MORPHOLOGY,
    TaskType.HISTOLOGICAL_TYPING: ExpertRole.DIAGNOSIS,
    TaskType.GRADING: ExpertRole.DIAGNOSIS,
    TaskType.MOLECULAR_SUBTYPING: ExpertRole.DIAGNOSIS,
    TaskType.STAGING: ExpertRole.DIAGNOSIS,
    TaskType.TREATMENT_RECOMMENDATION: ExpertRole.TREATMENT_PLANNING,
    TaskType.PROGNOSIS: ExpertRole.TREATMENT_PLANNING,
    TaskType.REPORT_GENERATION: ExpertRole.REPORT_GENERATION,
}


# ---------------------------------------------------------------------------
# Query
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Query:
    """A slide reference plus the natural-language question asked about it.

    The question must be nonempty after trimming. A thumbnail, when given,
    must decode to a raster no larger than 1024 pixels on either side; that
    check is deferred to :func:`validate_thumbnail` so constructing a query
    never touches the filesystem.
    """

    slide_ref: str
    question: str
    thumbnail_path: str | None = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("question must be nonempty")
        object.__setattr__(self, "question", self.question.strip())


MAX_THUMBNAIL_SIDE = 1024


def validate_thumbnail(path: str | Path) -> tuple[int, int]:
    """Decode a thumbnail and check both dimensions lie in [1, 1024].

    Returns (width, height). Raises BadThumbnail on any failure.
    """
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            width, height = img.size
    except (OSError, UnidentifiedImageError) as exc:
        raise BadThumbnail(f"cannot decode thumbnail {path}: {exc}") from exc
    for side in (width, height):
        if not 1 <= side <= MAX_THUMBNAIL_SIDE:
            raise BadThumbnail(
                f"thumbnail {path} is {width}x{height}; "
                f"both sides must be in [1, {MAX_THUMBNAIL_SIDE}]"
            )
    return width, height


# ---------------------------------------------------------------------------
# Verification weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightConfig:
    """Relative importance of the three verification scores.

    w1 weighs internal consistency, w2 weighs knowledge verification,
    w3 weighs classifier consensus.
    """

    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self) -> None:
        for name, value in (("w1", self.w1), ("w2", self.w2), ("w3", self.w3)):
            if value < 0:
                raise ConfigError(f"weight {name} must be nonnegative, got {value}")

    @property
    def total(self) -> float:
        return self.w1 + self.w2 + self.w3


def normalize_weights(w: WeightConfig) -> WeightConfig:
    """Scale the weights so they sum to one, preserving their ratios."""
    s = w.total
    if s == 0:
        raise AllZeroWeights("all verification weights are zero")
    return replace(w, w1=w.w1 / s, w2=w.w2 / s, w3=w.w3 / s)


# ---------------------------------------------------------------------------
# Score bundle
# ---------------------------------------------------------------------------

_SCORE_FIELDS = ("phi_g", "phi_e", "phi_l", "phi_k", "phi_a", "phi_b", "phi_c", "phi_total")


@dataclass(frozen=True)
class ScoreBundle:
    """All verification scores computed for one candidate response.

    phi_g:  pairwise claim compatibility
    phi_e:  evidence validity
    phi_l:  internal consistency, the mean of phi_g and phi_e
    phi_k:  knowledge verification against retrieved references
    phi_a:  agreement between the response's cancer type and the classifier panel
    phi_b:  pairwise agreement within the classifier panel
    phi_c:  classifier verification, phi_a scaled by the phi_b confidence factor
    phi_total: weighted combination used for best-response selection

    phi_c_applicable is False when no cancer type could be extracted, in
    which case phi_c carries 0.0 and is excluded from the total.
    """

    phi_g: float = 0.0
    phi_e: float = 0.0
    phi_l: float = 0.0
    phi_k: float = 0.0
    phi_a: float = 0.0
    phi_b: float = 0.0
    phi_c: float = 0.0
    phi_total: float = 0.0
    phi_c_applicable: bool = True

    def __post_init__(self) -> None:
        for name in _SCORE_FIELDS:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise OutOfRangeInput(f"{name} must lie in [0, 1], got {value}")

    def as_dict(self) -> dict:
        out = {name: getattr(self, name) for name in _SCORE_FIELDS}
        out["phi_c_applicable"] = self.phi_c_applicable
        return out


def require_unit_interval(**scores: float) -> None:
    """Raise OutOfRangeInput unless every named value lies in [0, 1]."""
    for name, value in scores.items():
        if not 0.0 <= value <= 1.0:
            raise OutOfRangeInput(f"{name} must lie in [0, 1], got {value}")
