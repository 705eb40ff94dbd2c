"""The three extraction workflows and the per-document union.

single_pass: one extraction call per chunk.
multi_pass: extraction followed by a normalization call that re-reads the
chunk together with the raw triples.
reflection: extraction followed by a critic/corrector loop that stops at
the first empty feedback report or after n_max refinement steps.

Failure policy: the first extraction fails closed (empty set), later
refinement calls fail open (keep the prior set), and a replay miss always
propagates because it signals a broken fixture store, not model output.
"""

from __future__ import annotations

import json
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .events import EventLog
from .gateway import (
    JsonPayloadError,
    LlmGateway,
    LlmRequest,
    Shape,
    TransportError,
)
from .model import (
    MODE_MULTI_PASS,
    MODE_REFLECTION,
    MODE_ROLES,
    MODE_SINGLE_PASS,
    Chunk,
    ExtractionMode,
    Schema,
    Triple,
    TripleSet,
    dedup_triples,
)

DEFAULT_EXTRACTION_MODEL = "Qwen2.5-72B-Instruct"
DEFAULT_N_MAX = 3

SYSTEM_EXTRACT = (
    "You are a precise financial information extraction engine. "
    "You follow the configured schema exactly and output only strict JSON."
)
SYSTEM_REVIEW = (
    "You are a meticulous reviewer of financial knowledge-graph triples. "
    "You follow the configured schema exactly and output only strict JSON."
)

#: Loose response shape for extraction-style calls: rows are validated
#: individually so that one malformed row is dropped, not the whole set.
ROWS = Shape(kind="array")
FEEDBACK_ITEMS = Shape(
    kind="array",
    items=Shape(kind="object", required=("triple_number", "triple", "issue", "suggestion")),
)

STOP_NO_ISSUES = "no_issues"
STOP_MAX_STEPS = "max_steps"

#: Failures recoverable inside a workflow. Anything else (notably a replay
#: miss) aborts the whole extraction stage.
_RECOVERABLE = (TransportError, JsonPayloadError)


@dataclass(frozen=True)
class FeedbackItem:
    """One critic finding: the triple as received, the problem, the fix."""

    triple_number: str
    triple: tuple[str, ...]
    issue: str
    suggestion: str

    def __post_init__(self) -> None:
        if not self.issue.strip():
            raise ValueError("feedback item must carry a non-empty issue")


@dataclass(frozen=True)
class FeedbackReport:
    """Critic output for one refinement step; empty items means no issues."""

    items: tuple[FeedbackItem, ...]
    step: int
    chunk_id: str

    def __post_init__(self) -> None:
        if self.step < 1:
            raise ValueError("feedback step must be positive")

    @property
    def empty(self) -> bool:
        return not self.items

    def to_record(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "step": self.step,
            "items": [
                {
                    "triple_number": i.triple_number,
                    "triple": list(i.triple),
                    "issue": i.issue,
                    "suggestion": i.suggestion,
                }
                for i in self.items
            ],
        }


@dataclass(frozen=True)
class ReflectionTrace:
    """Full audit trail of one chunk's critic/corrector loop.

    sets[k] is the triple set after step k+1, so len(sets) is the stopping
    step. Every feedback call appears in ``feedback``, including the final
    one that triggered the stop.
    """

    chunk_id: str
    sets: tuple[TripleSet, ...]
    feedback: tuple[FeedbackReport, ...]
    stop_reason: str
    n_max: int

    def __post_init__(self) -> None:
        if self.n_max < 1:
            raise ValueError("n_max must be at least 1")
        if not self.sets:
            raise ValueError("trace must contain at least the initial set")
        if len(self.sets) > self.n_max:
            raise ValueError(f"trace has {len(self.sets)} sets but n_max={self.n_max}")
        if self.stop_reason not in (STOP_NO_ISSUES, STOP_MAX_STEPS):
            raise ValueError(f"unknown stop_reason {self.stop_reason!r}")
        if self.stop_reason == STOP_NO_ISSUES and self.feedback and not self.feedback[-1].empty:
            raise ValueError("stop_reason=no_issues requires the last feedback to be empty")

    @property
    def stopping_step(self) -> int:
        return len(self.sets)

    @property
    def final_set(self) -> TripleSet:
        return self.sets[-1]


def load_prompt(name: str, prompt_dir: str | Path | None = None) -> str:
    """Packaged prompt template by file stem, or from an override directory."""
    if prompt_dir is not None:
        return (Path(prompt_dir) / f"{name}.txt").read_text(encoding="utf-8")
    return (resources.files("finkg") / "prompts" / f"{name}.txt").read_text(encoding="utf-8")


def build_mode(
    name: str,
    model: str = DEFAULT_EXTRACTION_MODEL,
    temperature: float = 0.0,
    max_output_tokens: int = 4096,
    prompt_dir: str | Path | None = None,
) -> ExtractionMode:
    """An ExtractionMode with its packaged prompt templates loaded."""
    prompt_set = {
        role: load_prompt(f"{name}.{role}", prompt_dir) for role in MODE_ROLES[name]
    }
    return ExtractionMode(
        name=name,
        prompt_set=prompt_set,
        model=model,
        temperature=temperature,
        max_output_tokens=max_output_tokens,
    )


def format_label_defs(defs) -> str:
    return "\n".join(f"- {d.label}: {d.definition}" for d in defs)


def format_ticker_map(ticker_map: Mapping[str, str]) -> str:
    if not ticker_map:
        return "none provided"
    return "\n".join(f"- {alias} -> {ticker}" for alias, ticker in sorted(ticker_map.items()))


def render_prompt(template: str, **values: str) -> str:
    return string.Template(template).substitute(values)


def _schema_values(schema: Schema) -> dict[str, str]:
    return {
        "entity_types": format_label_defs(schema.entity_types),
        "relation_types": format_label_defs(schema.relation_types),
        "ticker_map": format_ticker_map(schema.ticker_map),
    }


def rows_json(triples: Sequence[Triple]) -> str:
    return json.dumps([list(t.content_fields()) for t in triples], ensure_ascii=False)


def numbered_triples_json(triples: Sequence[Triple]) -> str:
    numbered = [
        {"triple_number": f"Triple {i}", "triple": list(t.content_fields())}
        for i, t in enumerate(triples, start=1)
    ]
    return json.dumps(numbered, ensure_ascii=False, indent=2)


def _coerce_field(value: object) -> str | None:
    if isinstance(value, str):
        return value.strip()
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return str(value)
    return None


def _rows_to_triples(
    rows: object,
    chunk: Chunk,
    mode_name: str,
    step: int,
    events: EventLog | None,
    tag: str,
) -> TripleSet:
    """Validate raw response rows individually; bad rows are dropped loudly."""
    triples: list[Triple] = []
    assert isinstance(rows, list)
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != 5:
            if events:
                events.emit(
                    "arity_drop",
                    f"{tag}: row {i} is not a 5-field array: {json.dumps(row, default=str)[:200]}",
                    chunk_id=chunk.chunk_id,
                    mode=mode_name,
                    step=step,
                )
            continue
        fields = [_coerce_field(v) for v in row]
        if any(f is None for f in fields) or not fields[0] or not fields[3]:
            if events:
                events.emit(
                    "arity_drop",
                    f"{tag}: row {i} has empty or non-scalar fields: "
                    f"{json.dumps(row, default=str)[:200]}",
                    chunk_id=chunk.chunk_id,
                    mode=mode_name,
                    step=step,
                )
            continue
        head, head_type, relation, tail, tail_type = fields  # type: ignore[misc]
        triples.append(
            Triple(
                head=head,
                head_type=head_type,
                relation=relation,
                tail=tail,
                tail_type=tail_type,
                chunk_id=chunk.chunk_id,
                doc_id=chunk.doc_id,
                mode=mode_name,
                step=step,
            )
        )
    return TripleSet(triples=dedup_triples(triples), chunk_id=chunk.chunk_id, mode=mode_name)


def _empty_set(chunk: Chunk, mode_name: str) -> TripleSet:
    return TripleSet(triples=(), chunk_id=chunk.chunk_id, mode=mode_name)


def _request(mode: ExtractionMode, prompt: str, tag: str, system: str = SYSTEM_EXTRACT) -> LlmRequest:
    return LlmRequest(
        model=mode.model,
        system_prompt=system,
        user_prompt=prompt,
        temperature=mode.temperature,
        max_output_tokens=mode.max_output_tokens,
        request_tag=tag,
    )


def _extract_rows(
    chunk: Chunk,
    schema: Schema,
    mode: ExtractionMode,
    gateway: LlmGateway,
    step: int,
    events: EventLog | None,
) -> TripleSet:
    """One extraction call; raises on transport or double-parse failure."""
    prompt = render_prompt(
        mode.template("extract"),
        section=chunk.section or "unknown",
        chunk_text=chunk.text,
        **_schema_values(schema),
    )
    tag = f"{mode.name}.extract"
    rows, _ = gateway.complete_json(_request(mode, prompt, tag), ROWS)
    return _rows_to_triples(rows, chunk, mode.name, step, events, tag)


def extract_single_pass(
    chunk: Chunk,
    schema: Schema,
    mode: ExtractionMode,
    gateway: LlmGateway,
    events: EventLog | None = None,
) -> TripleSet:
    """One comprehensive extraction call; fails closed to an empty set."""
    try:
        return _extract_rows(chunk, schema, mode, gateway, step=1, events=events)
    except _RECOVERABLE as exc:
        if events:
            events.emit(
                "extraction_failed",
                f"{mode.name}.extract: {exc}",
                chunk_id=chunk.chunk_id,
                mode=mode.name,
                step=1,
            )
        return _empty_set(chunk, mode.name)


def normalize_triples(
    chunk: Chunk,
    raw: TripleSet,
    schema: Schema,
    mode: ExtractionMode,
    gateway: LlmGateway,
    events: EventLog | None = None,
) -> TripleSet:
    """Normalization pass over raw triples; fails open to the raw set."""
    prompt = render_prompt(
        mode.template("normalize"),
        section=chunk.section or "unknown",
        chunk_text=chunk.text,
        triples_json=rows_json(tuple(raw)),
        **_schema_values(schema),
    )
    tag = f"{mode.name}.normalize"
    try:
        rows, _ = gateway.complete_json(_request(mode, prompt, tag), ROWS)
        return _rows_to_triples(rows, chunk, mode.name, 1, events, tag)
    except _RECOVERABLE as exc:
        if events:
            events.emit(
                "normalization_failed",
                f"{tag}: {exc}; keeping the raw set",
                chunk_id=chunk.chunk_id,
                mode=mode.name,
                step=1,
            )
        return raw


def extract_multi_pass(
    chunk: Chunk,
    schema: Schema,
    mode: ExtractionMode,
    gateway: LlmGateway,
    events: EventLog | None = None,
) -> TripleSet:
    """Extraction followed by normalization; an empty first pass short-circuits."""
    raw = extract_single_pass(chunk, schema, mode, gateway, events)
    if not len(raw):
        return raw
    return normalize_triples(chunk, raw, schema, mode, gateway, events)


def reflect_feedback(
    chunk: Chunk,
    current: TripleSet,
    schema: Schema,
    mode: ExtractionMode,
    step: int,
    gateway: LlmGateway,
    events: EventLog | None = None,
) -> FeedbackReport:
    """Critic call over the current set; parse failure reads as no issues."""
    prompt = render_prompt(
        mode.template("feedback"),
        section=chunk.section or "unknown",
        chunk_text=chunk.text,
        triples_numbered=numbered_triples_json(tuple(current)),
        entity_types=format_label_defs(schema.entity_types),
        relation_types=format_label_defs(schema.relation_types),
    )
    tag = f"{mode.name}.feedback"
    try:
        raw_items, _ = gateway.complete_json(
            _request(mode, prompt, tag, system=SYSTEM_REVIEW), FEEDBACK_ITEMS
        )
    except _RECOVERABLE as exc:
        if events:
            events.emit(
                "feedback_parse_failed",
                f"{tag}: {exc}; treating as empty feedback",
                chunk_id=chunk.chunk_id,
                mode=mode.name,
                step=step,
            )
        return FeedbackReport(items=(), step=step, chunk_id=chunk.chunk_id)

    items: list[FeedbackItem] = []
    assert isinstance(raw_items, list)
    for i, raw in enumerate(raw_items):
        assert isinstance(raw, dict)
        issue = str(raw["issue"]).strip()
        if not issue:
            if events:
                events.emit(
                    "feedback_item_drop",
                    f"{tag}: item {i} has an empty issue",
                    chunk_id=chunk.chunk_id,
                    mode=mode.name,
                    step=step,
                )
            continue
        triple_raw = raw["triple"]
        triple = (
            tuple(str(v) for v in triple_raw)
            if isinstance(triple_raw, list)
            else (str(triple_raw),)
        )
        items.append(
            FeedbackItem(
                triple_number=str(raw["triple_number"]),
                triple=triple,
                issue=issue,
                suggestion=str(raw["suggestion"]),
            )
        )
    return FeedbackReport(items=tuple(items), step=step, chunk_id=chunk.chunk_id)


def reflect_correct(
    chunk: Chunk,
    current: TripleSet,
    feedback: FeedbackReport,
    schema: Schema,
    mode: ExtractionMode,
    step: int,
    gateway: LlmGateway,
    events: EventLog | None = None,
) -> TripleSet:
    """Corrector call applying feedback; fails open to the current set."""
    if feedback.empty:
        raise ValueError("reflect_correct requires non-empty feedback")
    prompt = render_prompt(
        mode.template("correct"),
        section=chunk.section or "unknown",
        chunk_text=chunk.text,
        triples_numbered=numbered_triples_json(tuple(current)),
        feedback_json=json.dumps(feedback.to_record()["items"], ensure_ascii=False, indent=2),
        **_schema_values(schema),
    )
    tag = f"{mode.name}.correct"
    try:
        rows, _ = gateway.complete_json(
            _request(mode, prompt, tag, system=SYSTEM_REVIEW), ROWS
        )
        return _rows_to_triples(rows, chunk, mode.name, step, events, tag)
    except _RECOVERABLE as exc:
        if events:
            events.emit(
                "correction_failed",
                f"{tag}: {exc}; keeping the current set",
                chunk_id=chunk.chunk_id,
                mode=mode.name,
                step=step,
            )
        return current


def run_reflection(
    chunk: Chunk,
    schema: Schema,
    mode: ExtractionMode,
    gateway: LlmGateway,
    n_max: int = DEFAULT_N_MAX,
    events: EventLog | None = None,
) -> tuple[TripleSet, ReflectionTrace]:
    """Critic/corrector loop: at most n_max feedback calls, n_max - 1 corrections.

    The set after step t carries step=t on its triples. Feedback at
    refinement step t critiques the set from step t - 1.
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    try:
        initial = _extract_rows(chunk, schema, mode, gateway, step=1, events=events)
    except _RECOVERABLE as exc:
        if events:
            events.emit(
                "extraction_failed",
                f"{mode.name}.extract: {exc}",
                chunk_id=chunk.chunk_id,
                mode=mode.name,
                step=1,
            )
        initial = _empty_set(chunk, mode.name)
        trace = ReflectionTrace(
            chunk_id=chunk.chunk_id,
            sets=(initial,),
            feedback=(),
            stop_reason=STOP_NO_ISSUES,
            n_max=n_max,
        )
        return initial, trace

    sets: list[TripleSet] = [initial]
    reports: list[FeedbackReport] = []

    if not len(initial):
        # Nothing to critique; treat like an immediately clean set.
        trace = ReflectionTrace(
            chunk_id=chunk.chunk_id,
            sets=tuple(sets),
            feedback=(),
            stop_reason=STOP_NO_ISSUES,
            n_max=n_max,
        )
        return initial, trace

    while True:
        step = len(sets) + 1
        report = reflect_feedback(chunk, sets[-1], schema, mode, step, gateway, events)
        reports.append(report)
        if report.empty:
            stop_reason = STOP_NO_ISSUES
            break
        if len(sets) == n_max:
            stop_reason = STOP_MAX_STEPS
            break
        sets.append(reflect_correct(chunk, sets[-1], report, schema, mode, step, gateway, events))

    trace = ReflectionTrace(
        chunk_id=chunk.chunk_id,
        sets=tuple(sets),
        feedback=tuple(reports),
        stop_reason=stop_reason,
        n_max=n_max,
    )
    return sets[-1], trace


def union_document(
    per_chunk: Sequence[TripleSet], doc_id: str | None = None
) -> TripleSet:
    """Document-level union: first-seen provenance wins, chunk order kept."""
    if not per_chunk:
        raise ValueError("union requires at least one chunk set")
    if doc_id is None:
        for s in per_chunk:
            for t in s:
                doc_id = t.doc_id
                break
            if doc_id:
                break
        else:
            doc_id = per_chunk[0].chunk_id.split(":", 1)[0]
    merged = dedup_triples(t for s in per_chunk for t in s)
    return TripleSet(triples=merged, chunk_id=doc_id, mode=per_chunk[0].mode)


@dataclass(frozen=True)
class ExtractionBatch:
    """Per-chunk outputs of one mode over one document, in chunk order."""

    sets: tuple[TripleSet, ...]
    traces: tuple[ReflectionTrace, ...] = ()


def extract_chunks(
    chunks: Sequence[Chunk],
    schema: Schema,
    mode: ExtractionMode,
    gateway: LlmGateway,
    n_max: int = DEFAULT_N_MAX,
    events: EventLog | None = None,
    max_workers: int = 4,
) -> ExtractionBatch:
    """Run one mode over many chunks concurrently, merging in chunk order."""

    def run_one(chunk: Chunk):
        if mode.name == MODE_SINGLE_PASS:
            return extract_single_pass(chunk, schema, mode, gateway, events), None
        if mode.name == MODE_MULTI_PASS:
            return extract_multi_pass(chunk, schema, mode, gateway, events), None
        assert mode.name == MODE_REFLECTION
        return run_reflection(chunk, schema, mode, gateway, n_max, events)

    if not chunks:
        return ExtractionBatch(sets=())
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(run_one, chunks))
    sets = tuple(r[0] for r in results)
    traces = tuple(r[1] for r in results if r[1] is not None)
    return ExtractionBatch(sets=sets, traces=traces)
