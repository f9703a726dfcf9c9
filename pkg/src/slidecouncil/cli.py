"""Command-line surface: ask questions, manage the knowledge base, run benches.

Every command is deterministic under scripted backends; ``--no-timestamps``
plus a fixed ``--seed`` make output files byte-stable for golden testing.
"""
from __future__ import annotations

import json
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click

from . import pipeline as pl
from .backends import (
    BackendDescriptor,
    ChatRequest,
    chat_complete,
    first_number,
    make_substring_judge,
)
from .consistency import extract_claims
from .core import (
    BadChunkConfig,
    BenchFileError,
    ConfigError,
    CouncilError,
    EmptyList,
    ExpertRole,
    JudgeError,
    Query,
    ROLE_FOR_TASK,
    TaskType,
    validate_thumbnail,
)
from .fusion import fuse, load_map, render
from .knowledge import build_index, ingest, load_corpus, load_index, retrieve, save_index
from .memory import load as load_memory

GROUP_LABELS = {
    ExpertRole.MORPHOLOGY: "Morph.",
    ExpertRole.DIAGNOSIS: "Diagnosis",
    ExpertRole.TREATMENT_PLANNING: "Treat. Plan.",
    ExpertRole.REPORT_GENERATION: "Report Gen.",
}
OVERALL_LABEL = "Avg."


# ---------------------------------------------------------------------------
# Bench types and the precision metric
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchCase:
    """One benchmark item: a question plus its ground truth."""

    case_id: str
    slide_ref: str
    question: str
    ground_truth: str
    gt_claims: tuple[str, ...] = ()
    task_type: TaskType | None = None

    def __post_init__(self) -> None:
        if not self.case_id:
            raise BenchFileError("every bench case needs a case_id")
        if not self.ground_truth.strip():
            raise BenchFileError(f"case {self.case_id!r} has an empty ground_truth")


def load_bench(path: str | Path) -> list[BenchCase]:
    """Parse a bench file: a JSON list of case objects with unique ids."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise BenchFileError(f"cannot read bench file {path}: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise BenchFileError("bench file must hold a nonempty JSON list of cases")
    cases: list[BenchCase] = []
    seen: set[str] = set()
    for obj in raw:
        try:
            case = BenchCase(
                case_id=obj["case_id"],
                slide_ref=obj.get("slide_ref", ""),
                question=obj["question"],
                ground_truth=obj["ground_truth"],
                gt_claims=tuple(obj.get("gt_claims", ())),
                task_type=(
                    TaskType.parse(obj["task_type"]) if obj.get("task_type") else None
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BenchFileError(f"malformed bench case: {exc}") from exc
        if case.case_id in seen:
            raise BenchFileError(f"duplicate case_id {case.case_id!r}")
        seen.add(case.case_id)
        cases.append(case)
    return cases


def wsi_precision(gt_claims: list[str], answer: str, judge: BackendDescriptor) -> float:
    """Mean judged entailment of the ground-truth claims by the answer.

    The judge scores each claim in [0, 1]; out-of-range replies are
    clamped, replies without a number are an error.
    """
    if not gt_claims:
        raise EmptyList("wsi_precision needs at least one ground-truth claim")
    total = 0.0
    for claim in gt_claims:
        prompt = (
            "Judge whether the answer entails the claim. Reply with one number "
            "between 0 (not entailed) and 1 (fully entailed).\n\n"
            f"CLAIM: {claim}\n\nANSWER: {answer}"
        )
        reply = chat_complete(judge, ChatRequest(user_turns=(prompt,)))
        value = first_number(reply.text)
        if value is None:
            raise JudgeError(
                f"precision judge replied without a number: {reply.text!r}", judge.id
            )
        total += min(1.0, max(0.0, value))
    return total / len(gt_claims)


@dataclass
class BenchReport:
    """Per-case precisions plus per-group and overall means."""

    rows: list[dict] = field(default_factory=list)
    groups: dict[str, float] = field(default_factory=dict)
    overall: float = 0.0

    def to_payload(self) -> dict:
        return {"cases": self.rows, "groups": self.groups, "overall": self.overall}

    def to_table(self) -> str:
        headers = ("case_id", "task_type", "group", "precision")
        widths = [len(h) for h in headers]
        body = []
        for row in self.rows:
            cells = (
                row["case_id"],
                row["task_type"],
                row["group"],
                f"{row['precision']:.4f}",
            )
            widths = [max(w, len(c)) for w, c in zip(widths, cells)]
            body.append(cells)
        lines = [
            "  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
            "  ".join("-" * w for w in widths),
        ]
        lines.extend(
            "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip() for cells in body
        )
        lines.append("")
        for label in (*GROUP_LABELS.values(), OVERALL_LABEL):
            if label in self.groups or label == OVERALL_LABEL:
                value = self.overall if label == OVERALL_LABEL else self.groups[label]
                lines.append(f"{label.ljust(12)} {value:.4f}")
        return "\n".join(lines) + "\n"


def score_bench(
    cases: list[BenchCase],
    config: pl.PipelineConfig,
    judge: BackendDescriptor,
    extract_gt: bool = False,
    parallel: int = 1,
) -> BenchReport:
    """Run the pipeline on every case and aggregate WSI-Precision."""

    def run_one(case: BenchCase) -> dict:
        query = Query(slide_ref=case.slide_ref, question=case.question)
        run = pl.run(query, config)
        claims = list(case.gt_claims)
        if extract_gt or not claims:
            claims = [c.text for c in extract_claims(case.ground_truth, config.optional(config.claim_extractor))]
        precision = wsi_precision(claims, run.final.text, judge)
        role = ROLE_FOR_TASK.get(run.task_type)
        return {
            "case_id": case.case_id,
            "task_type": run.task_type.value,
            "group": GROUP_LABELS.get(role, "Other"),
            "precision": precision,
            "answer": run.final.text,
            "task_mismatch": (
                case.task_type is not None and case.task_type is not run.task_type
            ),
        }

    if parallel > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(run_one, cases))
    else:
        rows = [run_one(case) for case in cases]
    report = BenchReport(rows=rows)
    by_group: dict[str, list[float]] = {}
    for row in rows:
        by_group.setdefault(row["group"], []).append(row["precision"])
    report.groups = {g: sum(v) / len(v) for g, v in sorted(by_group.items())}
    report.overall = sum(r["precision"] for r in rows) / len(rows)
    return report


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _fail(exc: Exception) -> "click.ClickException":
    return click.ClickException(str(exc))


def _load_config(path: str) -> pl.PipelineConfig:
    try:
        return pl.load_config(path)
    except ConfigError as exc:
        raise click.UsageError(str(exc))


@click.group()
def main() -> None:
    """Pathology question answering over a council of model backends."""


@main.command()
@click.option("--slide", required=True, help="Slide identifier the question is about.")
@click.option("--question", required=True, help="The natural-language question.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--thumbnail", type=click.Path(exists=True), help="Optional slide thumbnail.")
@click.option("--out", type=click.Path(), help="Write the full run JSON here.")
@click.option("--session-id", help="Fixed session id (defaults to a query digest).")
@click.option("--disable", "disabled", multiple=True, help="Pipeline stage to disable; repeatable.")
@click.option("--no-timestamps", is_flag=True, help="Zero timestamps and latencies in output.")
@click.option("--seed", type=int, default=None, help="Seed the retry-jitter RNG.")
def ask(
    slide: str,
    question: str,
    config_path: str,
    thumbnail: str | None,
    out: str | None,
    session_id: str | None,
    disabled: tuple[str, ...],
    no_timestamps: bool,
    seed: int | None,
) -> None:
    """Answer one question about a slide and print the final answer."""
    if seed is not None:
        random.seed(seed)
    config = _load_config(config_path)
    if no_timestamps:
        config.suppress_timing = True
    if session_id:
        config.session_id = session_id
    try:
        if thumbnail:
            validate_thumbnail(thumbnail)
        query = Query(slide_ref=slide, question=question, thumbnail_path=thumbnail)
        if disabled:
            run_result = pl.run_ablation(query, config, disabled)
        else:
            run_result = pl.run(query, config)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    except (CouncilError, OSError, ValueError) as exc:
        raise _fail(exc)
    if out:
        Path(out).write_text(run_result.to_json(), encoding="utf-8")
    click.echo(run_result.final.text)


@main.command("ingest-kb")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--chunk-size", type=int, default=None, help="Characters per chunk.")
@click.option("--overlap", type=int, default=None, help="Character overlap between chunks.")
def ingest_kb(manifest: str, out_path: str, chunk_size: int | None, overlap: int | None) -> None:
    """Chunk and index the corpus named by a manifest file."""
    from .knowledge import DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP

    size = DEFAULT_CHUNK_SIZE if chunk_size is None else chunk_size
    ov = DEFAULT_OVERLAP if overlap is None else overlap
    try:
        docs = load_corpus(manifest)
        chunks = ingest(docs, size, ov)
        index = build_index(chunks)
        save_index(index, out_path)
    except BadChunkConfig as exc:
        raise click.UsageError(str(exc))
    except (CouncilError, OSError, ValueError) as exc:
        raise _fail(exc)
    click.echo(f"chunks: {index.corpus_size}")
    click.echo(f"terms: {len(index.vocabulary)}")


@main.command("query-kb")
@click.argument("keywords", nargs=-1, required=True)
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--top-k", type=int, default=5)
@click.option("--show-text", is_flag=True, help="Print the text of each hit.")
def query_kb(keywords: tuple[str, ...], index_path: str, top_k: int, show_text: bool) -> None:
    """Retrieve the chunks best matching the given keywords."""
    try:
        index = load_index(index_path)
        hits = retrieve(index, list(keywords), top_k)
    except (CouncilError, OSError, ValueError) as exc:
        raise _fail(exc)
    if not hits:
        click.echo("no matching chunks")
        return
    for hit in hits:
        click.echo(f"{hit.rank}  {hit.chunk_id}  {hit.score:.6f}")
        if show_text:
            click.echo(f"   {index.chunk_by_id(hit.chunk_id).text}")


@main.command()
@click.option("--bench-file", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_prefix", type=click.Path(), help="Write OUT.json and OUT.txt.")
@click.option("--judge", "judge_id", help="Config backend id for the precision judge.")
@click.option("--extract-claims", "extract_gt", is_flag=True,
              help="Extract ground-truth claims instead of reading gt_claims.")
@click.option("--parallel", type=int, default=1, help="Concurrent bench cases.")
@click.option("--no-timestamps", is_flag=True)
@click.option("--seed", type=int, default=None)
def bench(
    bench_file: str,
    config_path: str,
    out_prefix: str | None,
    judge_id: str | None,
    extract_gt: bool,
    parallel: int,
    no_timestamps: bool,
    seed: int | None,
) -> None:
    """Run every bench case through the pipeline and score WSI-Precision."""
    if seed is not None:
        random.seed(seed)
    config = _load_config(config_path)
    if no_timestamps:
        config.suppress_timing = True
    try:
        cases = load_bench(bench_file)
    except BenchFileError as exc:
        raise click.UsageError(str(exc))
    try:
        judge = config.backend(judge_id) if judge_id else make_substring_judge()
        report = score_bench(cases, config, judge, extract_gt, parallel)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    except (CouncilError, OSError, ValueError) as exc:
        raise _fail(exc)
    if out_prefix:
        base = Path(out_prefix)
        base.with_suffix(".json").write_text(
            json.dumps(report.to_payload(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        base.with_suffix(".txt").write_text(report.to_table(), encoding="utf-8")
    click.echo(report.to_table(), nl=False)


@main.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True))
@click.option("--session", "session_id", help="Only this session (default: all).")
def report(log_path: str, session_id: str | None) -> None:
    """Pretty-print a persisted memory log."""
    try:
        store = load_memory(log_path)
    except (CouncilError, OSError) as exc:
        raise _fail(exc)
    sessions = [session_id] if session_id else store.sessions()
    for sid in sessions:
        entries = store.query(sid)
        if not entries:
            click.echo(f"session {sid}: no entries")
            continue
        click.echo(f"session {sid}")
        for e in entries:
            marker = "" if e.response_index is None else f" r{e.response_index}"
            click.echo(
                f"  {e.seq:>4}  {e.agent.value:<12}{marker}  "
                + json.dumps(e.payload, sort_keys=True)
            )


@main.command("fuse-maps")
@click.argument("maps", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--rows", type=int, default=8, help="Target grid rows.")
@click.option("--cols", type=int, default=8, help="Target grid cols.")
@click.option("--mode", type=click.Choice(["mean", "max"]), default="mean")
def fuse_maps(maps: tuple[str, ...], out_path: str, rows: int, cols: int, mode: str) -> None:
    """Fuse attention-map JSON files into one PNG heatmap plus sidecar."""
    try:
        loaded = [load_map(p) for p in maps]
        fused = fuse(loaded, (rows, cols), mode)
        png, sidecar = render(fused, out_path)
    except (CouncilError, OSError, ValueError) as exc:
        raise _fail(exc)
    if fused.degenerate:
        click.echo("warning: fused map was constant; output forced to zeros", err=True)
    click.echo(f"wrote {png} and {sidecar}")


if __name__ == "__main__":
    sys.exit(main())
