"""Append-only session log of every agent's verification output.

One store instance accompanies a pipeline run. Appends are serialized
internally, so concurrent agents can log without racing on sequence
numbers; readers always observe a consistent prefix. Persistence is a
JSON-lines file with a schema-versioned header line.
"""
from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import CorruptLine, SerializationError, StorageFull

FORMAT_NAME = "slidecouncil-memory"
FORMAT_VERSION = 1


class AgentKind(enum.Enum):
    TASK = "Task"
    EXPERT = "Expert"
    LOGIC = "Logic"
    FACT = "Fact"
    CONSENSUS = "Consensus"
    SUMMARIZING = "Summarizing"
    REASONING = "Reasoning"

    @classmethod
    def parse(cls, raw: str) -> "AgentKind":
        needle = raw.strip().lower()
        for kind in cls:
            if kind.value.lower() == needle:
                return kind
        raise ValueError(f"unknown agent kind: {raw!r}")


@dataclass(frozen=True)
class LogEntry:
    session_id: str
    seq: int
    agent: AgentKind
    payload: Mapping[str, Any]
    response_index: int | None = None
    timestamp_ms: int = 0

    def __post_init__(self) -> None:
        if not self.session_id:
            raise ValueError("session id must be nonempty")
        if self.seq < 1:
            raise ValueError("seq starts at 1")
        if self.timestamp_ms < 0:
            raise ValueError("timestamp must be nonnegative")

    def to_json_obj(self) -> dict:
        obj = {
            "session_id": self.session_id,
            "seq": self.seq,
            "agent": self.agent.value,
            "payload": dict(self.payload),
            "timestamp_ms": self.timestamp_ms,
        }
        if self.response_index is not None:
            obj["response_index"] = self.response_index
        return obj

    @classmethod
    def from_json_obj(cls, obj: Mapping[str, Any]) -> "LogEntry":
        return cls(
            session_id=obj["session_id"],
            seq=obj["seq"],
            agent=AgentKind.parse(obj["agent"]),
            payload=obj["payload"],
            response_index=obj.get("response_index"),
            timestamp_ms=obj.get("timestamp_ms", 0),
        )


def _encode(obj: Any) -> str:
    # sort_keys so identical stores persist byte-identically
    try:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))
    except (TypeError, ValueError) as exc:
        raise SerializationError(f"payload is not JSON-serializable: {exc}") from exc


class MemoryStore:
    """Thread-safe, append-only log store keyed by session.

    ``max_entries`` caps the store (StorageFull past it). ``sink_path``
    streams every accepted entry to a JSON-lines file, flushed per
    append, so logs survive a crash mid-run.
    """

    def __init__(self, max_entries: int | None = None, sink_path: str | Path | None = None):
        if max_entries is not None and max_entries < 1:
            raise ValueError("max_entries must be positive when given")
        self._lock = threading.Lock()
        self._entries: list[LogEntry] = []
        self._next_seq: dict[str, int] = {}
        self._max_entries = max_entries
        self._sink = None
        if sink_path is not None:
            self._sink = open(sink_path, "w", encoding="utf-8")

    def append(
        self,
        session_id: str,
        agent: AgentKind,
        payload: Mapping[str, Any],
        response_index: int | None = None,
        timestamp_ms: int = 0,
    ) -> int:
        """Record one entry; returns its assigned per-session seq."""
        with self._lock:
            if self._max_entries is not None and len(self._entries) >= self._max_entries:
                raise StorageFull(f"memory store is capped at {self._max_entries} entries")
            seq = self._next_seq.get(session_id, 0) + 1
            entry = LogEntry(
                session_id=session_id,
                seq=seq,
                agent=agent,
                payload=payload,
                response_index=response_index,
                timestamp_ms=timestamp_ms,
            )
            line = _encode(entry.to_json_obj())
            if self._sink is not None:
                if not self._entries:
                    self._sink.write(_header_line() + "\n")
                self._sink.write(line + "\n")
                self._sink.flush()
            self._entries.append(entry)
            self._next_seq[session_id] = seq
            return seq

    def query(
        self,
        session_id: str,
        agent: AgentKind | None = None,
    ) -> list[LogEntry]:
        """Entries of one session in seq order, optionally one agent's."""
        with self._lock:
            snapshot = list(self._entries)
        picked = [e for e in snapshot if e.session_id == session_id]
        if agent is not None:
            picked = [e for e in picked if e.agent is agent]
        return sorted(picked, key=lambda e: e.seq)

    def sessions(self) -> list[str]:
        with self._lock:
            return sorted(self._next_seq)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def all_entries(self) -> list[LogEntry]:
        with self._lock:
            return list(self._entries)

    def close(self) -> None:
        if self._sink is not None:
            self._sink.close()
            self._sink = None


def _header_line() -> str:
    return _encode({"format": FORMAT_NAME, "version": FORMAT_VERSION})


def persist(store: MemoryStore, path: str | Path) -> None:
    """Write the store as JSON lines; an empty store yields an empty file."""
    entries = store.all_entries()
    with open(path, "w", encoding="utf-8") as fh:
        if not entries:
            return
        fh.write(_header_line() + "\n")
        for entry in entries:
            fh.write(_encode(entry.to_json_obj()) + "\n")


def _parse_lines(lines: Iterable[str]) -> list[LogEntry]:
    entries: list[LogEntry] = []
    for line_no, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
            if not isinstance(obj, dict):
                raise ValueError("entry line must be a JSON object")
            if line_no == 1 and obj.get("format") == FORMAT_NAME:
                if obj.get("version") != FORMAT_VERSION:
                    raise ValueError(f"unsupported format version {obj.get('version')!r}")
                continue
            entries.append(LogEntry.from_json_obj(obj))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptLine(line_no, f"cannot parse line {line_no}: {exc}") from exc
    return entries


def load(path: str | Path) -> MemoryStore:
    """Rebuild a store from a persisted file.

    Raises CorruptLine with the 1-based file line number at the first
    unparseable line; nothing after it is read.
    """
    with open(path, "r", encoding="utf-8") as fh:
        entries = _parse_lines(fh)
    store = MemoryStore()
    for entry in entries:
        store.append(
            session_id=entry.session_id,
            agent=entry.agent,
            payload=entry.payload,
            response_index=entry.response_index,
            timestamp_ms=entry.timestamp_ms,
        )
    return store
