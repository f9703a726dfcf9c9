"""Council-style orchestration for pathology slide question answering.

A query fans out to a zoo of model backends; each candidate answer is
verified for internal consistency, against retrieved reference knowledge,
and against a panel of slide classifiers; the best candidate seeds a
summary that a council of reasoning agents deliberates to consensus.
"""
from .allocation import (
    CandidateResponse,
    TaskAssignment,
    generate_candidates,
    route_task,
    select_models,
)
from .backends import (
    BackendDescriptor,
    ChatRequest,
    ChatResponse,
    ClassifierVerdict,
    chat_complete,
    classify,
    make_scripted_backend,
    make_substring_judge,
    normalize_label,
)
from .consistency import (
    Claim,
    CompatibilityMatrix,
    Evidence,
    compatibility_score,
    extract_claims,
    internal_consistency,
    judge_compatibility,
    judge_evidence,
    validity_score,
)
from .core import (
    CouncilError,
    ExpertRole,
    Query,
    ROLE_FOR_TASK,
    ScoreBundle,
    TaskType,
    WeightConfig,
    normalize_weights,
)
from .deliberation import (
    DeliberationState,
    FinalAnswer,
    Outcome,
    Verdict,
    VerificationRecord,
    Vote,
    deliberate,
    draft_summary,
    extract_aligned_content,
    select_best,
    total_score,
)
from .factcheck import (
    ConsensusResult,
    FactJudgment,
    KeywordSet,
    classifier_verification,
    classify_panel,
    consensus_check,
    extract_cancer_type,
    extract_keywords,
    fact_scores,
    inter_classifier_agreement,
    knowledge_verification,
    mllm_classifier_agreement,
)
from .fusion import AttentionMap, FusedMap, fuse, load_map, normalize_map, render, resample
from .knowledge import (
    Index,
    KnowledgeChunk,
    ReferenceSummary,
    RetrievalHit,
    SourceDocument,
    build_index,
    ingest,
    retrieve,
    summarize_references,
    tokenize,
)
from .memory import AgentKind, LogEntry, MemoryStore, load, persist
from .pipeline import (
    PipelineConfig,
    PipelineRun,
    Stage,
    config_from_dict,
    load_config,
    run,
    run_ablation,
)

__all__ = [
    "AgentKind",
    "AttentionMap",
    "BackendDescriptor",
    "CandidateResponse",
    "ChatRequest",
    "ChatResponse",
    "Claim",
    "ClassifierVerdict",
    "CompatibilityMatrix",
    "ConsensusResult",
    "CouncilError",
    "DeliberationState",
    "Evidence",
    "ExpertRole",
    "FactJudgment",
    "FinalAnswer",
    "FusedMap",
    "Index",
    "KeywordSet",
    "KnowledgeChunk",
    "LogEntry",
    "MemoryStore",
    "Outcome",
    "PipelineConfig",
    "PipelineRun",
    "Query",
    "ReferenceSummary",
    "RetrievalHit",
    "ROLE_FOR_TASK",
    "ScoreBundle",
    "SourceDocument",
    "Stage",
    "TaskAssignment",
    "TaskType",
    "Verdict",
    "VerificationRecord",
    "Vote",
    "WeightConfig",
    "build_index",
    "chat_complete",
    "classifier_verification",
    "classify",
    "classify_panel",
    "compatibility_score",
    "config_from_dict",
    "consensus_check",
    "deliberate",
    "draft_summary",
    "extract_aligned_content",
    "extract_cancer_type",
    "extract_claims",
    "extract_keywords",
    "fact_scores",
    "fuse",
    "generate_candidates",
    "ingest",
    "inter_classifier_agreement",
    "internal_consistency",
    "judge_compatibility",
    "judge_evidence",
    "knowledge_verification",
    "load",
    "load_config",
    "load_map",
    "make_scripted_backend",
    "make_substring_judge",
    "mllm_classifier_agreement",
    "normalize_label",
    "normalize_map",
    "normalize_weights",
    "persist",
    "render",
    "resample",
    "retrieve",
    "route_task",
    "run",
    "run_ablation",
    "select_best",
    "select_models",
    "summarize_references",
    "tokenize",
    "total_score",
    "validity_score",
]
