"""Core domain types: triples, schemas, chunks, documents, and triple sets.

Everything here is an immutable value object, safe to share across worker
threads. Canonical equality for triples lives here as well, since every
other module (dedup, union, coverage counting) depends on it.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

_WHITESPACE = re.compile(r"\s+")

#: Extraction mode tags, in canonical order.
MODE_SINGLE_PASS = "single_pass"
MODE_MULTI_PASS = "multi_pass"
MODE_REFLECTION = "reflection"
ALL_MODES = (MODE_SINGLE_PASS, MODE_MULTI_PASS, MODE_REFLECTION)

#: Prompt roles each mode must carry in its prompt set.
MODE_ROLES = {
    MODE_SINGLE_PASS: ("extract",),
    MODE_MULTI_PASS: ("extract", "normalize"),
    MODE_REFLECTION: ("extract", "feedback", "correct"),
}

#: Field order of the triple JSONL wire format (one object per line, UTF-8, LF).
TRIPLE_JSONL_FIELDS = (
    "head",
    "head_type",
    "relation",
    "tail",
    "tail_type",
    "chunk_id",
    "doc_id",
    "mode",
    "step",
)

CHUNK_NARRATIVE = "narrative"
CHUNK_TABLE = "table"


def normalize_surface(text: str) -> str:
    """Lowercase and collapse internal whitespace; used only for comparison.

    Original casing is always preserved in stored values.
    """
    return _WHITESPACE.sub(" ", text.strip()).lower()


def word_count(entity: str) -> int:
    """Number of maximal whitespace-delimited tokens after trimming."""
    return len(entity.split())


@dataclass(frozen=True)
class Triple:
    """A knowledge-graph 5-tuple plus provenance.

    ``step`` is the refinement iteration that produced the triple; it is 1
    for the single-pass and multi-pass modes.
    """

    head: str
    head_type: str
    relation: str
    tail: str
    tail_type: str
    chunk_id: str
    doc_id: str
    mode: str
    step: int = 1

    def __post_init__(self) -> None:
        if not self.head.strip():
            raise ValueError("triple head is empty")
        if not self.tail.strip():
            raise ValueError("triple tail is empty")
        if self.step < 0:
            raise ValueError(f"triple step must be nonnegative, got {self.step}")

    def content_fields(self) -> tuple[str, str, str, str, str]:
        return (self.head, self.head_type, self.relation, self.tail, self.tail_type)

    def to_record(self) -> dict:
        return {name: getattr(self, name) for name in TRIPLE_JSONL_FIELDS}

    @classmethod
    def from_record(cls, record: Mapping) -> "Triple":
        return cls(**{name: record[name] for name in TRIPLE_JSONL_FIELDS})


# Unit separator: cannot collide with anything the normalizer leaves in a field.
_KEY_SEP = "\x1f"


def canonical_key(t: Triple) -> str:
    """Duplicate-detection key over the five content fields.

    Case and internal whitespace are ignored; provenance (chunk, document,
    mode, step) is excluded, so identical facts extracted from different
    chunks collide on purpose.
    """
    return _KEY_SEP.join(normalize_surface(f) for f in t.content_fields())


def dedup_triples(triples: Iterable[Triple]) -> tuple[Triple, ...]:
    """Drop canonical duplicates, keeping the first occurrence of each key."""
    seen: set[str] = set()
    kept: list[Triple] = []
    for t in triples:
        key = canonical_key(t)
        if key not in seen:
            seen.add(key)
            kept.append(t)
    return tuple(kept)


@dataclass(frozen=True)
class LabelDef:
    """A schema label with its human-readable definition."""

    label: str
    definition: str


def _check_labels(kind: str, defs: Sequence[LabelDef]) -> None:
    if not defs:
        raise ValueError(f"schema has no {kind}")
    seen: dict[str, str] = {}
    for d in defs:
        if not d.label.strip():
            raise ValueError(f"empty {kind} label")
        folded = d.label.lower()
        if folded in seen:
            raise ValueError(f"duplicate {kind} label (case-insensitive): {d.label!r}")
        seen[folded] = d.label


@dataclass(frozen=True)
class Schema:
    """Closed-extraction contract: allowed entity types and relation types.

    ``ticker_map`` maps company-name aliases to canonical tickers and is
    surfaced to the extraction prompts; it is not used for any rule check.
    """

    entity_types: tuple[LabelDef, ...]
    relation_types: tuple[LabelDef, ...]
    ticker_map: Mapping[str, str] = field(default_factory=dict)
    schema_id: str = "default"

    def __post_init__(self) -> None:
        _check_labels("entity type", self.entity_types)
        _check_labels("relation type", self.relation_types)
        object.__setattr__(
            self, "_entity_labels", frozenset(d.label.lower() for d in self.entity_types)
        )
        object.__setattr__(
            self, "_relation_labels", frozenset(d.label.lower() for d in self.relation_types)
        )

    def has_entity_type(self, label: str) -> bool:
        return label.strip().lower() in self._entity_labels  # type: ignore[attr-defined]

    def has_relation(self, label: str) -> bool:
        return label.strip().lower() in self._relation_labels  # type: ignore[attr-defined]

    @property
    def entity_type_count(self) -> int:
        return len(self.entity_types)

    @property
    def relation_type_count(self) -> int:
        return len(self.relation_types)


@dataclass(frozen=True)
class ExtractionMode:
    """One of the three workflows plus its prompt templates and model knobs."""

    name: str
    prompt_set: Mapping[str, str]
    model: str
    temperature: float = 0.0
    max_output_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.name not in ALL_MODES:
            raise ValueError(f"unknown extraction mode {self.name!r}")
        missing = [r for r in MODE_ROLES[self.name] if r not in self.prompt_set]
        if missing:
            raise ValueError(f"mode {self.name!r} is missing prompt templates: {missing}")

    def template(self, role: str) -> str:
        return self.prompt_set[role]


@dataclass(frozen=True)
class Chunk:
    """A table-atomic or section-coherent document segment.

    ``char_span`` is the half-open offset range into the source markdown;
    ``text`` is always the exact source slice for that range.
    """

    chunk_id: str
    doc_id: str
    kind: str
    text: str
    section: str | None
    token_estimate: int
    char_span: tuple[int, int]

    def __post_init__(self) -> None:
        if self.kind not in (CHUNK_NARRATIVE, CHUNK_TABLE):
            raise ValueError(f"unknown chunk kind {self.kind!r}")
        if self.token_estimate < 0:
            raise ValueError("token_estimate must be nonnegative")
        start, end = self.char_span
        if not (0 <= start < end):
            raise ValueError(f"invalid char_span {self.char_span}")
        if end - start != len(self.text):
            raise ValueError("char_span length does not match text length")

    def to_record(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "kind": self.kind,
            "section": self.section,
            "token_estimate": self.token_estimate,
            "char_start": self.char_span[0],
            "char_end": self.char_span[1],
            "text": self.text,
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "Chunk":
        return cls(
            chunk_id=record["chunk_id"],
            doc_id=record["doc_id"],
            kind=record["kind"],
            section=record["section"],
            token_estimate=record["token_estimate"],
            char_span=(record["char_start"], record["char_end"]),
            text=record["text"],
        )


@dataclass(frozen=True)
class Document:
    """A source filing rendered to markdown, with its chunk partition.

    ``chunks`` may be empty before the chunking stage ran. When present,
    the chunks must be an ordered, disjoint, lossless partition of the
    markdown (concatenating chunk texts reproduces it byte for byte).
    """

    doc_id: str
    company_ticker: str
    source_path: str
    markdown: str
    chunks: tuple[Chunk, ...] = ()

    def __post_init__(self) -> None:
        if not self.chunks:
            return
        pos = 0
        for c in self.chunks:
            start, end = c.char_span
            if start != pos:
                raise ValueError(
                    f"chunk {c.chunk_id} starts at {start}, expected {pos} (gap or overlap)"
                )
            if self.markdown[start:end] != c.text:
                raise ValueError(f"chunk {c.chunk_id} text does not match source slice")
            pos = end
        if pos != len(self.markdown):
            raise ValueError(f"chunks cover {pos} of {len(self.markdown)} source characters")


@dataclass(frozen=True)
class TripleSet:
    """An ordered, canonically-deduplicated set of triples for one scope.

    ``chunk_id`` names the scope: a chunk id for per-chunk sets, or the
    document id for a document-level union.
    """

    triples: tuple[Triple, ...]
    chunk_id: str
    mode: str

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for t in self.triples:
            key = canonical_key(t)
            if key in seen:
                raise ValueError(f"duplicate triple in set: {t.content_fields()}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(self.triples)

    def keys(self) -> frozenset[str]:
        return frozenset(canonical_key(t) for t in self.triples)


def write_triples_jsonl(path: str | Path, triples: Iterable[Triple]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triples:
            fh.write(json.dumps(t.to_record(), ensure_ascii=False))
            fh.write("\n")


def read_triples_jsonl(path: str | Path) -> list[Triple]:
    triples: list[Triple] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                triples.append(Triple.from_record(json.loads(line)))
    return triples
