"""Table-atomic, section-coherent markdown chunking under a token budget.

Pipe tables are never fragmented: each detected table becomes exactly one
chunk even when it exceeds the budget (an oversize warning is recorded
instead). Narrative text between tables is split greedily at the
highest-preference boundary class that still fits the budget, falling back
to a hard character split only when a region has no usable boundary at all.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence

from .model import CHUNK_NARRATIVE, CHUNK_TABLE, Chunk, Document

logger = logging.getLogger(__name__)

BOUNDARY_HEADING = "heading"
BOUNDARY_BLANK_LINE = "blank_line"
BOUNDARY_SENTENCE = "sentence"
DEFAULT_BOUNDARIES = (BOUNDARY_HEADING, BOUNDARY_BLANK_LINE, BOUNDARY_SENTENCE)

ESTIMATOR_CHARS = "chars_div_4"
ESTIMATOR_WORDS = "whitespace_words_x1_33"
ESTIMATOR_EXTERNAL = "external"

_HEADING = re.compile(r"^(#{1,6})\s+(.+?)\s*$")
_SENTENCE_END = re.compile(r"[.!?][\"')\]]*\s+")
# Separator row of a pipe table: only pipes, dashes, colons, and spaces.
_SEPARATOR_CHARS = frozenset("|-: \t")


@dataclass(frozen=True)
class ChunkConfig:
    """Budget and boundary preferences for chunking."""

    max_tokens: int = 2048
    token_estimator: str = ESTIMATOR_CHARS
    split_boundaries: tuple[str, ...] = DEFAULT_BOUNDARIES
    external_estimator: Callable[[str], int] | None = None

    def __post_init__(self) -> None:
        if self.max_tokens < 64:
            raise ValueError(f"max_tokens must be >= 64, got {self.max_tokens}")
        if self.token_estimator not in (ESTIMATOR_CHARS, ESTIMATOR_WORDS, ESTIMATOR_EXTERNAL):
            raise ValueError(f"unknown token_estimator {self.token_estimator!r}")
        if self.token_estimator == ESTIMATOR_EXTERNAL and self.external_estimator is None:
            raise ValueError("external token_estimator requires external_estimator callable")
        bad = [b for b in self.split_boundaries if b not in DEFAULT_BOUNDARIES]
        if bad:
            raise ValueError(f"unknown split boundaries {bad}")


@dataclass(frozen=True)
class ChunkWarning:
    """Non-fatal chunking event worth surfacing in run reports."""

    kind: str  # "oversize_table" or "hard_split"
    chunk_id: str
    message: str


@dataclass(frozen=True)
class ChunkingResult:
    chunks: tuple[Chunk, ...]
    warnings: tuple[ChunkWarning, ...] = ()


def estimate_tokens(text: str, config: ChunkConfig) -> int:
    """Deterministic token estimate; monotone in prefix length."""
    if config.token_estimator == ESTIMATOR_CHARS:
        return math.ceil(len(text) / 4)
    if config.token_estimator == ESTIMATOR_WORDS:
        return math.ceil(len(text.split()) * 4 / 3)
    assert config.external_estimator is not None
    est = config.external_estimator(text)
    if est < 0:
        raise ValueError(f"external estimator returned negative value {est}")
    return est


def _is_separator_row(line: str) -> bool:
    s = line.strip()
    return bool(s) and set(s) <= _SEPARATOR_CHARS and "-" in s and "|" in s


def detect_tables(markdown: str) -> list[tuple[int, int]]:
    """Character spans of maximal pipe-table blocks, disjoint and ordered.

    A block qualifies only if a separator row follows at least one header
    row; spans exclude the newline after the final table line.
    """
    spans: list[tuple[int, int]] = []
    run_start: int | None = None
    run_lines: list[str] = []
    run_end = 0
    offset = 0

    def close_run() -> None:
        nonlocal run_start, run_lines
        if run_start is not None:
            if len(run_lines) >= 2 and any(_is_separator_row(l) for l in run_lines[1:]):
                spans.append((run_start, run_end))
            run_start = None
            run_lines = []

    for line in markdown.splitlines(keepends=True):
        stripped = line.rstrip("\r\n")
        if "|" in stripped:
            if run_start is None:
                run_start = offset
            run_lines.append(stripped)
            run_end = offset + len(stripped)
        else:
            close_run()
        offset += len(line)
    close_run()
    return spans


def _scan_sections(markdown: str, table_spans: Sequence[tuple[int, int]]) -> list[tuple[int, str]]:
    """(offset, title) for every ATX heading line outside table spans."""
    sections: list[tuple[int, str]] = []
    offset = 0
    for line in markdown.splitlines(keepends=True):
        m = _HEADING.match(line.rstrip("\r\n"))
        if m and not any(s <= offset < e for s, e in table_spans):
            sections.append((offset, m.group(2)))
        offset += len(line)
    return sections


def _section_for(sections: Sequence[tuple[int, str]], start: int) -> str | None:
    title = None
    for offset, heading in sections:
        if offset > start:
            break
        title = heading
    return title


def _boundary_candidates(text: str, boundary: str) -> list[int]:
    """Offsets within ``text`` where a cut of the given class may fall."""
    if boundary == BOUNDARY_HEADING:
        out = []
        offset = 0
        for line in text.splitlines(keepends=True):
            if offset > 0 and _HEADING.match(line.rstrip("\r\n")):
                out.append(offset)
            offset += len(line)
        return out
    if boundary == BOUNDARY_BLANK_LINE:
        # Cut at the first non-blank line after a run of blank lines, so the
        # blank run stays attached to the preceding chunk.
        out = []
        offset = 0
        prev_blank = False
        for line in text.splitlines(keepends=True):
            blank = not line.strip()
            if offset > 0 and prev_blank and not blank:
                out.append(offset)
            prev_blank = blank
            offset += len(line)
        return out
    if boundary == BOUNDARY_SENTENCE:
        return [m.end() for m in _SENTENCE_END.finditer(text) if 0 < m.end() < len(text)]
    raise ValueError(f"unknown boundary class {boundary!r}")


def _largest_fitting_prefix(text: str, config: ChunkConfig) -> int:
    """Largest prefix length whose estimate fits the budget (at least 1)."""
    lo, hi = 1, len(text) - 1
    best = 1
    while lo <= hi:
        mid = (lo + hi) // 2
        if estimate_tokens(text[:mid], config) <= config.max_tokens:
            best = mid
            lo = mid + 1
        else:
            hi = mid - 1
    return best


def _split_narrative(text: str, config: ChunkConfig) -> tuple[list[tuple[int, int]], list[int]]:
    """Greedy split of one narrative region into fitting pieces.

    Returns (piece spans relative to the region, hard-split cut offsets).
    """
    candidates = {b: _boundary_candidates(text, b) for b in config.split_boundaries}
    pieces: list[tuple[int, int]] = []
    hard_cuts: list[int] = []
    pos = 0
    while pos < len(text):
        if estimate_tokens(text[pos:], config) <= config.max_tokens:
            pieces.append((pos, len(text)))
            break
        cut = None
        for boundary in config.split_boundaries:
            fitting = [
                b
                for b in candidates[boundary]
                if pos < b < len(text) and estimate_tokens(text[pos:b], config) <= config.max_tokens
            ]
            if fitting:
                cut = max(fitting)
                break
        if cut is None:
            cut = pos + _largest_fitting_prefix(text[pos:], config)
            hard_cuts.append(cut)
        pieces.append((pos, cut))
        pos = cut
    return pieces, hard_cuts


def chunk_document(
    doc: Document,
    config: ChunkConfig,
    section_index: Sequence[tuple[int, str]] | None = None,
) -> ChunkingResult:
    """Partition a document's markdown into table and narrative chunks.

    The chunks are ordered by char_span and losslessly cover the source:
    concatenating their texts reproduces the markdown byte for byte.
    ``section_index`` overrides the built-in ATX heading scan when the
    caller already has section offsets from an ingest manifest.
    """
    markdown = doc.markdown
    if not markdown:
        return ChunkingResult(chunks=())

    table_spans = detect_tables(markdown)
    sections = list(section_index) if section_index is not None else _scan_sections(
        markdown, table_spans
    )

    # A table chunk absorbs the newline that terminates its last row, so the
    # following narrative region starts at a line boundary.
    regions: list[tuple[int, int, str]] = []
    pos = 0
    for t_start, t_end in table_spans:
        if t_start > pos:
            regions.append((pos, t_start, CHUNK_NARRATIVE))
        if t_end < len(markdown) and markdown[t_end] == "\n":
            t_end += 1
        regions.append((t_start, t_end, CHUNK_TABLE))
        pos = t_end
    if pos < len(markdown):
        regions.append((pos, len(markdown), CHUNK_NARRATIVE))

    chunks: list[Chunk] = []
    warnings: list[ChunkWarning] = []

    def next_chunk_id() -> str:
        return f"{doc.doc_id}:{len(chunks):04d}"

    for start, end, kind in regions:
        if kind == CHUNK_TABLE:
            text = markdown[start:end]
            estimate = estimate_tokens(text, config)
            chunk_id = next_chunk_id()
            if estimate > config.max_tokens:
                warnings.append(
                    ChunkWarning(
                        kind="oversize_table",
                        chunk_id=chunk_id,
                        message=(
                            f"table chunk estimated at {estimate} tokens exceeds "
                            f"budget {config.max_tokens}; kept atomic"
                        ),
                    )
                )
                logger.warning("oversize table %s: %d > %d", chunk_id, estimate, config.max_tokens)
            chunks.append(
                Chunk(
                    chunk_id=chunk_id,
                    doc_id=doc.doc_id,
                    kind=CHUNK_TABLE,
                    text=text,
                    section=_section_for(sections, start),
                    token_estimate=estimate,
                    char_span=(start, end),
                )
            )
            continue

        region_text = markdown[start:end]
        pieces, hard_cuts = _split_narrative(region_text, config)
        hard = set(hard_cuts)
        for rel_start, rel_end in pieces:
            text = region_text[rel_start:rel_end]
            chunk_id = next_chunk_id()
            if rel_end in hard:
                warnings.append(
                    ChunkWarning(
                        kind="hard_split",
                        chunk_id=chunk_id,
                        message=(
                            f"no {'/'.join(config.split_boundaries)} boundary fits the "
                            f"budget; hard split at offset {start + rel_end}"
                        ),
                    )
                )
                logger.warning("hard split in %s at offset %d", chunk_id, start + rel_end)
            chunks.append(
                Chunk(
                    chunk_id=chunk_id,
                    doc_id=doc.doc_id,
                    kind=CHUNK_NARRATIVE,
                    text=text,
                    section=_section_for(sections, start + rel_start),
                    token_estimate=estimate_tokens(text, config),
                    char_span=(start + rel_start, start + rel_end),
                )
            )

    return ChunkingResult(chunks=tuple(chunks), warnings=tuple(warnings))
