"""End-to-end orchestration: route, fan out, verify, select, deliberate.

A run is driven entirely by a PipelineConfig, so the same code path
serves scripted offline backends and live HTTP ones. Verification of the
candidates runs concurrently, but every result is logged to memory in
candidate order after the joins, which keeps runs with scripted backends
byte-for-byte reproducible.
"""
from __future__ import annotations

import enum
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .allocation import (
    CandidateResponse,
    RuleTable,
    TaskAssignment,
    default_rules,
    generate_candidates,
    load_rules,
    route_task,
    select_models,
)
from .backends import (
    ALL_TASKS,
    BackendDescriptor,
    ClassifierVerdict,
    default_synonyms,
    load_synonym_table,
)
from .consistency import (
    compatibility_score,
    extract_claims,
    internal_consistency,
    judge_compatibility,
    judge_evidence,
    validity_score,
)
from .core import (
    ConfigError,
    CouncilError,
    ExpertRole,
    Query,
    ROLE_FOR_TASK,
    ScoreBundle,
    TaskType,
    WeightConfig,
)
from .deliberation import (
    DeliberationState,
    FinalAnswer,
    VerificationRecord,
    deliberate,
    draft_summary,
    extract_aligned_content,
    final_answer_payload,
    select_best,
    total_score,
)
from .factcheck import (
    classify_panel,
    consensus_check,
    default_lexicon,
    extract_keywords,
    fact_scores,
    knowledge_verification,
)
from .fusion import FusedMap, fuse, load_map
from .knowledge import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_OVERLAP,
    DEFAULT_SUMMARY_BUDGET,
    DEFAULT_TOP_K,
    Index,
    build_index,
    ingest,
    load_corpus,
    load_index,
    retrieve,
    summarize_references,
)
from .memory import AgentKind, MemoryStore

REFUSAL_TEXT = (
    "This question falls outside the supported scope of pathology slide "
    "analysis, so no slide review was performed."
)

_TEMPLATE_FILES = {
    ExpertRole.MORPHOLOGY: "morphology.txt",
    ExpertRole.DIAGNOSIS: "diagnosis.txt",
    ExpertRole.TREATMENT_PLANNING: "treatment_planning.txt",
    ExpertRole.REPORT_GENERATION: "report_generation.txt",
}


class Stage(enum.Enum):
    """The pipeline stages that can be disabled one by one."""

    ICV = "ICV"
    FACT_EKV = "FactEKV"
    CONSENSUS_EKV = "ConsensusEKV"
    SUMMARIZING = "Summarizing"
    REASONING = "Reasoning"
    TASK_ROUTING = "TaskRouting"
    EXPERT_SELECTION = "ExpertSelection"

    @classmethod
    def parse(cls, raw: "Stage | str") -> "Stage":
        if isinstance(raw, Stage):
            return raw
        needle = raw.replace("_", "").replace("-", "").strip().lower()
        for stage in cls:
            if stage.value.lower() == needle:
                return stage
        raise ConfigError(f"unknown pipeline stage: {raw!r}")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    """Everything a run needs: the backend registry and the wiring."""

    backends: dict[str, BackendDescriptor]
    zoo: list[str]
    classifiers: list[str] = field(default_factory=list)
    reasoners: list[str] = field(default_factory=list)
    weights: WeightConfig = field(default_factory=WeightConfig)
    session_id: str | None = None
    suppress_timing: bool = False
    router: str | None = None
    rules_path: str | None = None
    default_task: TaskType | None = None
    models_per_query: int | None = None
    parallelism: int = 4
    claim_extractor: str | None = None
    logic_judge: str | None = None
    keyword_extractor: str | None = None
    fact_judge: str | None = None
    type_extractor: str | None = None
    summarizer: str | None = None
    alignment_judge: str | None = None
    kb_manifest: str | None = None
    kb_index: str | None = None
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP
    top_k: int = DEFAULT_TOP_K
    kb_summarizer: str | None = None
    summary_budget: int = DEFAULT_SUMMARY_BUDGET
    max_rounds: int = 3
    synonyms_path: str | None = None
    lexicon_path: str | None = None
    prompts_dir: str | None = None
    fusion_maps: list[str] = field(default_factory=list)
    fusion_grid: tuple[int, int] = (8, 8)
    fusion_mode: str = "mean"
    memory_sink: str | None = None
    memory_max: int | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.zoo:
            raise ConfigError("the model zoo must list at least one chat backend")
        for bid in self.zoo:
            if self._kind(bid) != "chat":
                raise ConfigError(f"zoo backend {bid!r} must be a chat backend")
        for bid in self.classifiers:
            if self._kind(bid) != "classifier":
                raise ConfigError(f"panel backend {bid!r} must be a classifier backend")
        chat_roles = {
            "router": self.router,
            "claim_extractor": self.claim_extractor,
            "logic_judge": self.logic_judge,
            "keyword_extractor": self.keyword_extractor,
            "fact_judge": self.fact_judge,
            "type_extractor": self.type_extractor,
            "summarizer": self.summarizer,
            "alignment_judge": self.alignment_judge,
            "kb_summarizer": self.kb_summarizer,
        }
        for role, bid in chat_roles.items():
            if bid is not None and self._kind(bid) != "chat":
                raise ConfigError(f"{role} backend {bid!r} must be a chat backend")
        for bid in self.reasoners:
            if self._kind(bid) != "chat":
                raise ConfigError(f"reasoner backend {bid!r} must be a chat backend")
        if self.weights.total == 0:
            raise ConfigError("all verification weights are zero")
        if self.weights.w1 > 0 and self.logic_judge is None:
            raise ConfigError("a positive logic weight needs a logic_judge backend")
        if self.weights.w2 > 0 and self.fact_judge is None and (
            self.kb_manifest or self.kb_index
        ):
            raise ConfigError("a positive knowledge weight with a knowledge base needs a fact_judge")
        if not 0 <= self.overlap < self.chunk_size:
            raise ConfigError("chunk overlap must satisfy 0 <= overlap < chunk_size")
        if self.max_rounds < 1:
            raise ConfigError("deliberation needs at least one round")
        if self.models_per_query is not None and self.models_per_query < 1:
            raise ConfigError("models_per_query must be >= 1 when set")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.fusion_mode not in ("mean", "max"):
            raise ConfigError(f"unknown fusion mode: {self.fusion_mode!r}")
        if any(g < 1 for g in self.fusion_grid):
            raise ConfigError("fusion target grid must be at least 1x1")

    def _kind(self, bid: str) -> str:
        return self.backend(bid).kind

    def backend(self, bid: str) -> BackendDescriptor:
        try:
            return self.backends[bid]
        except KeyError:
            raise ConfigError(f"config references unknown backend {bid!r}") from None

    def optional(self, bid: str | None) -> BackendDescriptor | None:
        return None if bid is None else self.backend(bid)


def _parse_tasks(raw: Any) -> frozenset[TaskType]:
    if raw is None or raw == "all":
        return ALL_TASKS
    if not isinstance(raw, list) or not raw:
        raise ConfigError("supported_tasks must be 'all' or a nonempty list of task names")
    return frozenset(TaskType.parse(name) for name in raw)


def _parse_backend(entry: Mapping[str, Any], base: Path) -> BackendDescriptor:
    if "id" not in entry:
        raise ConfigError("every backend entry needs an id")
    endpoint = entry.get("endpoint", "") or ""
    if entry.get("script_path"):
        endpoint = str((base / entry["script_path"]).resolve())
    known = {
        "id", "kind", "endpoint", "script", "script_path",
        "supported_tasks", "timeout_ms", "max_retries",
    }
    unknown = set(entry) - known
    if unknown:
        raise ConfigError(f"backend {entry['id']!r} has unknown keys: {sorted(unknown)}")
    script = entry.get("script")
    offline = script is not None or endpoint.endswith(".json") or endpoint.startswith("builtin:")
    return BackendDescriptor(
        id=entry["id"],
        kind=entry.get("kind", "chat"),
        endpoint=endpoint,
        supported_tasks=_parse_tasks(entry.get("supported_tasks")),
        timeout_ms=entry.get("timeout_ms", 30_000),
        max_retries=entry.get("max_retries", 0 if offline else 2),
        script=script,
    )


def _resolve(base: Path, value: str | None) -> str | None:
    return None if value is None else str((base / value).resolve())


def config_from_dict(raw: Mapping[str, Any], base_dir: str | Path = ".") -> PipelineConfig:
    """Build a validated PipelineConfig from a parsed config mapping.

    Relative paths are resolved against ``base_dir``, normally the
    directory of the config file.
    """
    base = Path(base_dir)
    backends: dict[str, BackendDescriptor] = {}
    for entry in raw.get("backends", []):
        descriptor = _parse_backend(entry, base)
        if descriptor.id in backends:
            raise ConfigError(f"duplicate backend id {descriptor.id!r}")
        backends[descriptor.id] = descriptor
    session = raw.get("session", {}) or {}
    weights_raw = raw.get("weights", {}) or {}
    routing = raw.get("routing", {}) or {}
    fanout = raw.get("fanout", {}) or {}
    agents = raw.get("agents", {}) or {}
    knowledge = raw.get("knowledge", {}) or {}
    delib = raw.get("deliberation", {}) or {}
    lexicons = raw.get("lexicons", {}) or {}
    fusion_raw = raw.get("fusion", {}) or {}
    mem = raw.get("memory", {}) or {}
    default_task = routing.get("default_task")
    grid = fusion_raw.get("target_grid", [8, 8])
    if not (isinstance(grid, (list, tuple)) and len(grid) == 2):
        raise ConfigError("fusion target_grid must be a [rows, cols] pair")
    return PipelineConfig(
        backends=backends,
        zoo=list(raw.get("zoo", [])),
        classifiers=list(raw.get("classifiers", [])),
        reasoners=list(agents.get("reasoners", [])),
        weights=WeightConfig(
            w1=float(weights_raw.get("logic", 1.0)),
            w2=float(weights_raw.get("knowledge", 1.0)),
            w3=float(weights_raw.get("consensus", 1.0)),
        ),
        session_id=session.get("id"),
        suppress_timing=bool(session.get("suppress_timing", False)),
        router=routing.get("router"),
        rules_path=_resolve(base, routing.get("rules_path")),
        default_task=None if default_task is None else TaskType.parse(default_task),
        models_per_query=fanout.get("models_per_query"),
        parallelism=int(fanout.get("parallelism", 4)),
        claim_extractor=agents.get("claim_extractor"),
        logic_judge=agents.get("logic_judge"),
        keyword_extractor=agents.get("keyword_extractor"),
        fact_judge=agents.get("fact_judge"),
        type_extractor=agents.get("type_extractor"),
        summarizer=agents.get("summarizer"),
        alignment_judge=agents.get("alignment_judge"),
        kb_manifest=_resolve(base, knowledge.get("manifest")),
        kb_index=_resolve(base, knowledge.get("index")),
        chunk_size=int(knowledge.get("chunk_size", DEFAULT_CHUNK_SIZE)),
        overlap=int(knowledge.get("overlap", DEFAULT_OVERLAP)),
        top_k=int(knowledge.get("top_k", DEFAULT_TOP_K)),
        kb_summarizer=knowledge.get("summarizer"),
        summary_budget=int(knowledge.get("summary_budget", DEFAULT_SUMMARY_BUDGET)),
        max_rounds=int(delib.get("max_rounds", 3)),
        synonyms_path=_resolve(base, lexicons.get("synonyms")),
        lexicon_path=_resolve(base, lexicons.get("diagnostic_terms")),
        prompts_dir=_resolve(base, raw.get("prompts_dir")),
        fusion_maps=[_resolve(base, p) for p in fusion_raw.get("maps", [])],
        fusion_grid=(int(grid[0]), int(grid[1])),
        fusion_mode=fusion_raw.get("mode", "mean"),
        memory_sink=_resolve(base, mem.get("sink")),
        memory_max=mem.get("max_entries"),
    )


def load_config(path: str | Path) -> PipelineConfig:
    """Parse a YAML config file into a validated PipelineConfig."""
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config {p} must hold a mapping at the top level")
    return config_from_dict(raw, p.parent)


# ---------------------------------------------------------------------------
# Run state
# ---------------------------------------------------------------------------

@dataclass
class PipelineRun:
    """The full observable outcome of one query."""

    session_id: str
    query: Query
    task_type: TaskType
    expert_role: ExpertRole | None
    candidates: list[CandidateResponse]
    records: list[VerificationRecord]
    final: FinalAnswer
    state: DeliberationState | None = None
    fused: FusedMap | None = None
    refused: bool = False
    log_entries: list = field(default_factory=list)
    suppress_timing: bool = False

    def __post_init__(self) -> None:
        if not self.refused:
            if len(self.records) != sum(1 for c in self.candidates if c.ok):
                raise ValueError("one verification record per successful candidate")
            if self.final.best_response_index >= len(self.records):
                raise ValueError("best response index must point into the records")

    def to_payload(self) -> dict:
        best_scores = (
            self.records[self.final.best_response_index].scores
            if self.records
            else ScoreBundle(phi_c_applicable=False)
        )
        return {
            "session_id": self.session_id,
            "query": {"slide_ref": self.query.slide_ref, "question": self.query.question},
            "task_type": self.task_type.value,
            "expert_role": self.expert_role.value if self.expert_role else None,
            "refused": self.refused,
            "candidates": [
                {
                    "model_id": c.model_id,
                    "text": c.text,
                    "elapsed_ms": 0 if self.suppress_timing else c.elapsed_ms,
                    "error": c.error,
                }
                for c in self.candidates
            ],
            "records": [
                {
                    "response_index": r.response_index,
                    "model_id": r.model_id,
                    "scores": r.scores.as_dict(),
                    "logs_ref": r.logs_ref,
                }
                for r in self.records
            ],
            "final": final_answer_payload(self.final, best_scores, self.state),
            "fused_map": None
            if self.fused is None
            else {
                "rows": self.fused.rows,
                "cols": self.fused.cols,
                "values": list(self.fused.values),
                "source_ids": list(self.fused.source_ids),
                "degenerate": self.fused.degenerate,
            },
            "log": [e.to_json_obj() for e in self.log_entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), sort_keys=True, indent=2) + "\n"


def derive_session_id(query: Query) -> str:
    digest = hashlib.sha256(f"{query.slide_ref}\n{query.question}".encode("utf-8"))
    return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def run(query: Query, config: PipelineConfig, store: MemoryStore | None = None) -> PipelineRun:
    """Execute the full pipeline for one query."""
    return _execute(query, config, frozenset(), store)


def run_ablation(
    query: Query,
    config: PipelineConfig,
    disable: Iterable[Stage | str],
    store: MemoryStore | None = None,
) -> PipelineRun:
    """Execute the pipeline with the given stages disabled.

    Disabled verification stages contribute weight zero (the rest are
    renormalized); disabled Summarizing returns the raw best response and
    skips deliberation; disabled Reasoning stops at the initial draft;
    disabled TaskRouting uses the configured default task; disabled
    ExpertSelection fans out to the whole zoo.
    """
    return _execute(query, config, frozenset(Stage.parse(s) for s in disable), store)


class _RunContext:
    """Mutable bookkeeping shared by the stage helpers of one run."""

    def __init__(self, query: Query, config: PipelineConfig, store: MemoryStore | None):
        self.query = query
        self.config = config
        self.owns_store = store is None
        self.store = store or MemoryStore(
            max_entries=config.memory_max, sink_path=config.memory_sink
        )
        self.session_id = config.session_id or derive_session_id(query)
        self.synonyms = (
            load_synonym_table(config.synonyms_path)
            if config.synonyms_path
            else default_synonyms()
        )
        self.lexicon = (
            load_synonym_table(config.lexicon_path)
            if config.lexicon_path
            else default_lexicon()
        )

    def now_ms(self) -> int:
        return 0 if self.config.suppress_timing else int(time.time() * 1000)

    def log(self, agent: AgentKind, payload: Mapping[str, Any], response_index: int | None = None) -> int:
        return self.store.append(
            session_id=self.session_id,
            agent=agent,
            payload=payload,
            response_index=response_index,
            timestamp_ms=self.now_ms(),
        )


def _load_template(config: PipelineConfig, role: ExpertRole | None) -> str:
    if role is None:
        return ""
    directory = (
        Path(config.prompts_dir)
        if config.prompts_dir
        else Path(__file__).parent / "data" / "prompts"
    )
    path = directory / _TEMPLATE_FILES[role]
    if not path.exists():
        raise ConfigError(f"missing prompt template for {role.value}: {path}")
    return path.read_text(encoding="utf-8").strip()


def _load_knowledge(config: PipelineConfig) -> Index | None:
    if config.kb_index:
        return load_index(config.kb_index)
    if config.kb_manifest:
        docs = load_corpus(config.kb_manifest)
        chunks = ingest(docs, config.chunk_size, config.overlap)
        return build_index(chunks)
    return None


def _logs_digest(records: list[VerificationRecord]) -> str:
    lines = []
    for r in records:
        scores = r.scores
        consensus = f"{scores.phi_c:.6f}" if scores.phi_c_applicable else "n/a"
        lines.append(
            f"candidate {r.response_index} ({r.model_id}): "
            f"logic={scores.phi_l:.6f} knowledge={scores.phi_k:.6f} "
            f"consensus={consensus} total={scores.phi_total:.6f}"
        )
    return "\n".join(lines)


def _route(ctx: _RunContext, disabled: frozenset[Stage]) -> TaskAssignment:
    config = ctx.config
    if Stage.TASK_ROUTING in disabled:
        if config.default_task is None:
            raise ConfigError("disabling TaskRouting requires routing.default_task")
        assignment = TaskAssignment(
            task_type=config.default_task,
            expert_role=ROLE_FOR_TASK.get(config.default_task),
            rationale="task routing disabled; using the configured default task",
        )
    else:
        rules = load_rules(config.rules_path) if config.rules_path else default_rules()
        assignment = route_task(ctx.query.question, config.optional(config.router), rules)
    payload = {
        "event": "routed",
        "question": ctx.query.question,
        "slide_ref": ctx.query.slide_ref,
        "task_type": assignment.task_type.value,
        "expert_role": assignment.expert_role.value if assignment.expert_role else None,
        "rationale": assignment.rationale,
    }
    if disabled:
        payload["disabled_stages"] = sorted(s.value for s in disabled)
    ctx.log(AgentKind.TASK, payload)
    return assignment


@dataclass
class _Verification:
    """Raw outcome of one candidate's three concurrent checks."""

    bundle: ScoreBundle
    logic_payload: dict
    fact_payload: dict
    consensus_payload: dict


def _verify_candidate(
    ctx: _RunContext,
    candidate: CandidateResponse,
    weights: WeightConfig,
    index: Index | None,
    verdicts: list[ClassifierVerdict],
) -> _Verification:
    config = ctx.config
    skip_logic = weights.w1 == 0
    skip_fact = weights.w2 == 0
    skip_consensus = weights.w3 == 0
    claims = None
    claims_error: str | None = None
    if not (skip_logic and skip_fact):
        try:
            claims = extract_claims(candidate.text, config.optional(config.claim_extractor))
        except CouncilError as exc:
            claims_error = str(exc)

    def do_logic() -> tuple[float, float, float, dict]:
        if skip_logic:
            return 0.0, 0.0, 0.0, {"event": "logic", "disabled": True}
        if claims is None:
            return 0.0, 0.0, 0.0, {"event": "logic", "failed": True, "error": claims_error}
        try:
            judge = config.backend(config.logic_judge)
            matrix = judge_compatibility(claims, judge, config.parallelism)
            phi_g = compatibility_score(matrix)
            validities = judge_evidence(claims, judge, config.parallelism)
            phi_e = validity_score(validities)
            phi_l = internal_consistency(phi_g, phi_e)
        except CouncilError as exc:
            return 0.0, 0.0, 0.0, {"event": "logic", "failed": True, "error": str(exc)}
        payload = {
            "event": "logic",
            "claims": [
                {"index": c.index, "text": c.text, "evidence": c.evidence.text if c.evidence else None}
                for c in claims
            ],
            "matrix": matrix.to_payload(),
            "validities": validities,
            "phi_g": phi_g,
            "phi_e": phi_e,
            "phi_l": phi_l,
        }
        return phi_g, phi_e, phi_l, payload

    def do_fact() -> tuple[float, dict]:
        if skip_fact:
            return 0.0, {"event": "fact", "disabled": True}
        if claims is None:
            return 0.0, {"event": "fact", "failed": True, "error": claims_error}
        try:
            keywords = extract_keywords(
                claims, config.optional(config.keyword_extractor), ctx.lexicon
            )
            hits = (
                retrieve(index, list(keywords.terms), config.top_k)
                if index is not None and keywords.terms
                else []
            )
            reference = summarize_references(
                hits,
                index.chunks if index is not None else [],
                config.optional(config.kb_summarizer),
                config.summary_budget,
            )
            judgments = fact_scores(
                claims, reference, config.optional(config.fact_judge), config.parallelism
            )
            phi_k = knowledge_verification([j.f for j in judgments])
        except CouncilError as exc:
            return 0.0, {"event": "fact", "failed": True, "error": str(exc)}
        payload = {
            "event": "fact",
            "keywords": list(keywords.terms),
            "hits": [{"chunk_id": h.chunk_id, "score": h.score, "rank": h.rank} for h in hits],
            "reference_empty": reference.empty,
            "judgments": [{"claim_index": j.claim_index, "f": j.f} for j in judgments],
            "phi_k": phi_k,
        }
        return phi_k, payload

    def do_consensus() -> tuple[float, float, float, bool, dict]:
        # a check that errors scores 0 at full weight; a check that is
        # disabled or finds no cancer type is excluded and renormalized
        if skip_consensus:
            return 0.0, 0.0, 0.0, False, {"event": "consensus", "disabled": True}
        try:
            result = consensus_check(
                candidate.text,
                verdicts,
                config.optional(config.type_extractor),
                ctx.synonyms,
            )
        except CouncilError as exc:
            return 0.0, 0.0, 0.0, True, {"event": "consensus", "failed": True, "error": str(exc)}
        payload = dict({"event": "consensus"}, **result.to_payload())
        return result.phi_a, result.phi_b, result.phi_c, result.applicable, payload

    with ThreadPoolExecutor(max_workers=3) as pool:
        logic_f = pool.submit(do_logic)
        fact_f = pool.submit(do_fact)
        consensus_f = pool.submit(do_consensus)
        phi_g, phi_e, phi_l, logic_payload = logic_f.result()
        phi_k, fact_payload = fact_f.result()
        phi_a, phi_b, phi_c, applicable, consensus_payload = consensus_f.result()

    bundle = ScoreBundle(
        phi_g=phi_g,
        phi_e=phi_e,
        phi_l=phi_l,
        phi_k=phi_k,
        phi_a=phi_a,
        phi_b=phi_b,
        phi_c=phi_c,
        phi_c_applicable=applicable,
    )
    total = total_score(bundle, weights)
    bundle = replace(bundle, phi_total=total)
    return _Verification(
        bundle=bundle,
        logic_payload=logic_payload,
        fact_payload=fact_payload,
        consensus_payload=consensus_payload,
    )


def _refusal_run(ctx: _RunContext, assignment: TaskAssignment) -> PipelineRun:
    final = FinalAnswer(text=REFUSAL_TEXT, best_response_index=0, phi_total_best=0.0)
    return PipelineRun(
        session_id=ctx.session_id,
        query=ctx.query,
        task_type=assignment.task_type,
        expert_role=None,
        candidates=[],
        records=[],
        final=final,
        refused=True,
        log_entries=ctx.store.query(ctx.session_id),
        suppress_timing=ctx.config.suppress_timing,
    )


def _execute(
    query: Query,
    config: PipelineConfig,
    disabled: frozenset[Stage],
    store: MemoryStore | None,
) -> PipelineRun:
    ctx = _RunContext(query, config, store)
    try:
        return _run_stages(ctx, disabled)
    finally:
        if ctx.owns_store:
            ctx.store.close()


def _run_stages(ctx: _RunContext, disabled: frozenset[Stage]) -> PipelineRun:
    config = ctx.config
    assignment = _route(ctx, disabled)
    if assignment.task_type is TaskType.OUT_OF_SCOPE:
        return _refusal_run(ctx, assignment)

    # expert selection and candidate fan-out
    zoo = [config.backend(bid) for bid in config.zoo]
    try:
        if Stage.EXPERT_SELECTION in disabled:
            models = list(zoo)
        else:
            models = select_models(assignment.task_type, zoo, config.models_per_query)
    except CouncilError as exc:
        ctx.log(AgentKind.EXPERT, {"event": "error", "error": str(exc)})
        raise
    ctx.log(
        AgentKind.EXPERT,
        {
            "event": "selected",
            "expert_role": assignment.expert_role.value if assignment.expert_role else None,
            "model_ids": [m.id for m in models],
            "selection_disabled": Stage.EXPERT_SELECTION in disabled,
        },
    )
    template = _load_template(config, assignment.expert_role)
    try:
        candidates = generate_candidates(
            ctx.query, models, template, assignment.task_type, config.parallelism
        )
    except CouncilError as exc:
        ctx.log(AgentKind.EXPERT, {"event": "error", "error": str(exc)})
        raise
    for i, cand in enumerate(candidates):
        ctx.log(
            AgentKind.EXPERT,
            {
                "event": "candidate",
                "model_id": cand.model_id,
                "text": cand.text,
                "error": cand.error,
            },
            response_index=i,
        )

    # shared verification inputs
    effective = WeightConfig(
        w1=0.0 if Stage.ICV in disabled else config.weights.w1,
        w2=0.0 if Stage.FACT_EKV in disabled else config.weights.w2,
        w3=0.0 if Stage.CONSENSUS_EKV in disabled else config.weights.w3,
    )
    index = _load_knowledge(config) if effective.w2 > 0 else None
    verdicts: list[ClassifierVerdict] = []
    if effective.w3 > 0 and config.classifiers:
        verdicts = classify_panel(
            [config.backend(bid) for bid in config.classifiers],
            ctx.query.slide_ref,
            ctx.synonyms,
            config.parallelism,
        )

    # per-candidate verification, concurrent; logged in candidate order
    succeeded = [(i, c) for i, c in enumerate(candidates) if c.ok]
    with ThreadPoolExecutor(max_workers=min(config.parallelism, max(1, len(succeeded)))) as pool:
        outcomes = list(
            pool.map(
                lambda pair: _verify_candidate(ctx, pair[1], effective, index, verdicts),
                succeeded,
            )
        )
    records: list[VerificationRecord] = []
    for (i, cand), outcome in zip(succeeded, outcomes):
        logic_seq = ctx.log(AgentKind.LOGIC, outcome.logic_payload, response_index=i)
        ctx.log(AgentKind.FACT, outcome.fact_payload, response_index=i)
        ctx.log(AgentKind.CONSENSUS, outcome.consensus_payload, response_index=i)
        records.append(
            VerificationRecord(
                response_index=i,
                scores=outcome.bundle,
                phi_total=outcome.bundle.phi_total,
                model_id=cand.model_id,
                logs_ref=f"{ctx.session_id}#{logic_seq}",
            )
        )

    # selection, drafting, deliberation
    best_idx = select_best(records)
    best_record = records[best_idx]
    best_candidate = candidates[best_record.response_index]
    digest = _logs_digest(records)
    state: DeliberationState | None = None
    if Stage.SUMMARIZING in disabled:
        final = FinalAnswer(
            text=best_candidate.text,
            best_response_index=best_idx,
            phi_total_best=best_record.phi_total,
        )
    else:
        others = [
            candidates[r.response_index] for j, r in enumerate(records) if j != best_idx
        ]
        aligned = extract_aligned_content(
            best_candidate, others, config.optional(config.alignment_judge)
        )
        draft = draft_summary(
            best_candidate, aligned, digest, config.optional(config.summarizer)
        )
        ctx.log(
            AgentKind.SUMMARIZING,
            {
                "event": "draft",
                "best_record_index": best_idx,
                "best_response_index": best_record.response_index,
                "aligned": aligned,
                "draft": draft,
                "digest": digest,
            },
        )
        if Stage.REASONING in disabled or not config.reasoners:
            final = FinalAnswer(
                text=draft,
                best_response_index=best_idx,
                phi_total_best=best_record.phi_total,
            )
        else:
            final, state = deliberate(
                draft,
                [config.backend(bid) for bid in config.reasoners],
                best_idx,
                best_record.phi_total,
                config.max_rounds,
                config.optional(config.summarizer),
                digest,
                config.parallelism,
            )
            for round_no, votes in enumerate(state.vote_history, start=1):
                ctx.log(
                    AgentKind.REASONING,
                    {
                        "event": "votes",
                        "round": round_no,
                        "votes": [
                            {
                                "reasoner_id": v.reasoner_id,
                                "verdict": v.verdict.value,
                                "suggestion": v.suggestion,
                                "failed": v.failed,
                            }
                            for v in votes
                        ],
                    },
                )
            ctx.log(
                AgentKind.REASONING,
                {
                    "event": "outcome",
                    "outcome": state.outcome.value if state.outcome else None,
                    "rounds": state.round,
                    "final_text": final.text,
                },
            )

    fused = None
    if config.fusion_maps:
        maps = [load_map(p) for p in config.fusion_maps]
        fused = fuse(maps, config.fusion_grid, config.fusion_mode)

    return PipelineRun(
        session_id=ctx.session_id,
        query=ctx.query,
        task_type=assignment.task_type,
        expert_role=assignment.expert_role,
        candidates=candidates,
        records=records,
        final=final,
        state=state,
        fused=fused,
        log_entries=ctx.store.query(ctx.session_id),
        suppress_timing=config.suppress_timing,
    )
