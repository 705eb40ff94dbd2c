"""Financial knowledge-graph extraction and evaluation toolkit.

Builds (head, head_type, relation, tail, tail_type) triples from
markdown-rendered filings with schema-guided LLM workflows, and scores the
results with rule checks, coverage ratios, entropy diversity measures, and
a pairwise LLM-judge protocol.
"""

__version__ = "0.1.0"

from .model import (
    ALL_MODES,
    Chunk,
    Document,
    ExtractionMode,
    LabelDef,
    Schema,
    Triple,
    TripleSet,
    canonical_key,
    dedup_triples,
    read_triples_jsonl,
    word_count,
    write_triples_jsonl,
)
from .pipeline import (
    ConfigError,
    RunConfig,
    RunManifest,
    load_config,
    load_schema,
    run_pipeline,
)

__all__ = [
    "ALL_MODES",
    "Chunk",
    "ConfigError",
    "Document",
    "ExtractionMode",
    "LabelDef",
    "RunConfig",
    "RunManifest",
    "Schema",
    "Triple",
    "TripleSet",
    "canonical_key",
    "dedup_triples",
    "load_config",
    "load_schema",
    "read_triples_jsonl",
    "run_pipeline",
    "word_count",
    "write_triples_jsonl",
    "__version__",
]
