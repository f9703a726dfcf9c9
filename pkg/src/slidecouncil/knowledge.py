"""Pathology reference knowledge base: chunking, indexing, retrieval.

Documents are split with a sliding character window, indexed into an
inverted index scored with BM25 (k1=1.2, b=0.75), and retrieved chunks
are summarized into reference text for fact checking. Everything here is
deterministic: identical corpus and query always give identical ranked
ids and identical persisted bytes.
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .backends import BackendDescriptor, ChatRequest, chat_complete
from .core import BackendError, BadChunkConfig, EmptyCorpus, SummarizerError

INDEX_FORMAT_VERSION = 1

DEFAULT_CHUNK_SIZE = 512
DEFAULT_OVERLAP = 64
DEFAULT_TOP_K = 5
DEFAULT_SUMMARY_BUDGET = 2000

BM25_K1 = 1.2
BM25_B = 0.75


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    title: str
    body: str
    origin: str = ""

    def __post_init__(self) -> None:
        if not self.body:
            raise ValueError(f"document {self.doc_id} has an empty body")


@dataclass(frozen=True)
class KnowledgeChunk:
    """A contiguous slice of one document; ids encode the start offset."""

    chunk_id: str
    doc_id: str
    start: int
    end: int
    text: str


@dataclass(frozen=True)
class RetrievalHit:
    chunk_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class ReferenceSummary:
    """The reference text assembled from retrieved chunks."""

    text: str
    supporting_chunk_ids: tuple[str, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.text.strip()


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------

def ingest(
    docs: list[SourceDocument],
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
) -> list[KnowledgeChunk]:
    """Split documents into overlapping windows of ``chunk_size`` chars.

    Consecutive chunks of a document advance by ``chunk_size - overlap``;
    the final partial chunk is kept when nonempty. Chunk ids are
    ``doc_id:start`` so re-ingestion is reproducible.
    """
    if chunk_size <= 0 or overlap < 0 or overlap >= chunk_size:
        raise BadChunkConfig(
            f"need 0 <= overlap < chunk_size, got size={chunk_size} overlap={overlap}"
        )
    stride = chunk_size - overlap
    chunks: list[KnowledgeChunk] = []
    for doc in docs:
        body = doc.body
        start = 0
        while start < len(body):
            end = min(start + chunk_size, len(body))
            chunks.append(
                KnowledgeChunk(
                    chunk_id=f"{doc.doc_id}:{start}",
                    doc_id=doc.doc_id,
                    start=start,
                    end=end,
                    text=body[start:end],
                )
            )
            if end == len(body):
                break
            start += stride
    return chunks


def reconstruct(chunks: list[KnowledgeChunk], doc_id: str, overlap: int) -> str:
    """Rebuild a document body from its chunks by stripping the overlaps."""
    own = sorted((c for c in chunks if c.doc_id == doc_id), key=lambda c: c.start)
    parts = [own[0].text] if own else []
    parts += [c.text[overlap:] for c in own[1:]]
    return "".join(parts)


# ---------------------------------------------------------------------------
# Indexing and retrieval
# ---------------------------------------------------------------------------

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop tokens shorter than 2."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if len(t) >= 2]


@dataclass
class Index:
    """Inverted index with the statistics BM25 needs.

    The chunk list is the source of truth; term statistics are derived
    from it deterministically, which is also how persistence works.
    """

    chunks: list[KnowledgeChunk]
    k1: float = BM25_K1
    b: float = BM25_B
    term_freqs: list[Counter] = field(default_factory=list, repr=False)
    doc_freq: Counter = field(default_factory=Counter, repr=False)
    lengths: list[int] = field(default_factory=list, repr=False)
    avgdl: float = 0.0

    @property
    def corpus_size(self) -> int:
        return len(self.chunks)

    @property
    def vocabulary(self) -> set[str]:
        return set(self.doc_freq)

    def chunk_by_id(self, chunk_id: str) -> KnowledgeChunk:
        return self._by_id[chunk_id]

    def __post_init__(self) -> None:
        self._by_id = {c.chunk_id: c for c in self.chunks}


def build_index(chunks: list[KnowledgeChunk], k1: float = BM25_K1, b: float = BM25_B) -> Index:
    """Build the inverted index over ``chunks``."""
    if not chunks:
        raise EmptyCorpus("cannot index an empty chunk list")
    index = Index(chunks=list(chunks), k1=k1, b=b)
    for chunk in index.chunks:
        tokens = tokenize(chunk.text)
        freqs = Counter(tokens)
        index.term_freqs.append(freqs)
        index.lengths.append(len(tokens))
        for term in freqs:
            index.doc_freq[term] += 1
    index.avgdl = sum(index.lengths) / len(index.lengths)
    return index


def _idf(index: Index, term: str) -> float:
    df = index.doc_freq.get(term, 0)
    if df == 0:
        return 0.0
    # Nonnegative variant so a matching term never hurts a chunk.
    return math.log(1.0 + (index.corpus_size - df + 0.5) / (df + 0.5))


def retrieve(index: Index, keywords: list[str], top_k: int = DEFAULT_TOP_K) -> list[RetrievalHit]:
    """Rank chunks against the keyword bag by BM25.

    Returns at most ``top_k`` hits with strictly positive scores, sorted
    by descending score then ascending chunk id. An empty result is a
    valid outcome when no chunk shares a term with the keywords.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    terms: list[str] = []
    for kw in keywords:
        terms.extend(tokenize(kw))
    scored: list[tuple[float, str]] = []
    for pos, chunk in enumerate(index.chunks):
        freqs = index.term_freqs[pos]
        if not freqs:
            continue
        norm = index.k1 * (1 - index.b + index.b * index.lengths[pos] / index.avgdl)
        score = 0.0
        for term in terms:
            tf = freqs.get(term, 0)
            if tf == 0:
                continue
            score += _idf(index, term) * tf * (index.k1 + 1) / (tf + norm)
        if score > 0.0:
            scored.append((score, chunk.chunk_id))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [
        RetrievalHit(chunk_id=cid, score=score, rank=rank)
        for rank, (score, cid) in enumerate(scored[:top_k], start=1)
    ]


# ---------------------------------------------------------------------------
# Reference summarization
# ---------------------------------------------------------------------------

def summarize_references(
    hits: list[RetrievalHit],
    chunks: list[KnowledgeChunk],
    summarizer: BackendDescriptor | None = None,
    budget: int = DEFAULT_SUMMARY_BUDGET,
) -> ReferenceSummary:
    """Turn retrieved chunks into one reference text.

    Without a summarizer backend the hit texts are concatenated in rank
    order and truncated to ``budget`` characters; with one, its reply is
    used verbatim. Zero hits give an empty summary either way.
    """
    if not hits:
        return ReferenceSummary(text="", supporting_chunk_ids=())
    by_id = {c.chunk_id: c for c in chunks}
    ordered = sorted(hits, key=lambda h: h.rank)
    ids = tuple(h.chunk_id for h in ordered)
    texts = [by_id[h.chunk_id].text for h in ordered]
    if summarizer is None:
        return ReferenceSummary(text="\n\n".join(texts)[:budget], supporting_chunk_ids=ids)
    prompt = (
        "Summarize the key facts from these pathology reference passages into "
        "a short, dense paragraph.\n\n" + "\n\n".join(texts)
    )
    try:
        reply = chat_complete(summarizer, ChatRequest(user_turns=(prompt,)))
    except BackendError as exc:
        raise SummarizerError(f"reference summarizer failed: {exc}", exc.backend_id) from exc
    return ReferenceSummary(text=reply.text, supporting_chunk_ids=ids)


# ---------------------------------------------------------------------------
# Persistence and corpus loading
# ---------------------------------------------------------------------------

def save_index(index: Index, path: str | Path) -> None:
    """Write the index to a JSON file with stable bytes."""
    payload = {
        "format_version": INDEX_FORMAT_VERSION,
        "k1": index.k1,
        "b": index.b,
        "chunks": [
            {
                "chunk_id": c.chunk_id,
                "doc_id": c.doc_id,
                "start": c.start,
                "end": c.end,
                "text": c.text,
            }
            for c in index.chunks
        ],
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")), encoding="utf-8"
    )


def load_index(path: str | Path) -> Index:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    version = data.get("format_version")
    if version != INDEX_FORMAT_VERSION:
        raise ValueError(f"unsupported index format version: {version!r}")
    chunks = [
        KnowledgeChunk(
            chunk_id=c["chunk_id"],
            doc_id=c["doc_id"],
            start=c["start"],
            end=c["end"],
            text=c["text"],
        )
        for c in data["chunks"]
    ]
    return build_index(chunks, k1=data["k1"], b=data["b"])


def load_corpus(manifest_path: str | Path) -> list[SourceDocument]:
    """Read a corpus manifest: a JSON list of {path, title, origin} entries.

    Paths are resolved relative to the manifest file. ``doc_id`` defaults
    to the file stem and may be overridden per entry.
    """
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise ValueError("manifest must be a JSON list")
    docs: list[SourceDocument] = []
    seen: set[str] = set()
    for entry in entries:
        doc_path = manifest_path.parent / entry["path"]
        doc_id = entry.get("doc_id", doc_path.stem)
        if doc_id in seen:
            raise ValueError(f"duplicate doc_id in manifest: {doc_id}")
        seen.add(doc_id)
        docs.append(
            SourceDocument(
                doc_id=doc_id,
                title=entry.get("title", doc_id),
                body=doc_path.read_text(encoding="utf-8"),
                origin=entry.get("origin", ""),
            )
        )
    return docs
