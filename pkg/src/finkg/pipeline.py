"""Run orchestration: config, stage sequencing, persistence, report rendering.

A run lives under ``<out_dir>/<run_id>/`` with one subdirectory per stage
family::

    chunks/   <doc_id>.chunks.jsonl
    triples/  triples.<mode>.jsonl, union.<mode>.jsonl
    traces/   trace.reflection.jsonl
    eval/     report.intrinsic.<mode>.json
    judge/    judge.outcomes.jsonl, report.judge.json
    report.md
    manifest.json
    errors.jsonl

The manifest records per-stage status and a sha256 per output file; a
re-run skips any stage whose recorded outputs still hash clean. Timestamps
never participate in hashing, so replay-mode runs are reproducible byte
for byte.
"""

from __future__ import annotations

import concurrent.futures
import datetime as _dt
import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .chunking import (
    ESTIMATOR_CHARS,
    ESTIMATOR_WORDS,
    ChunkConfig,
    chunk_document,
)
from .events import EventLog
from .evaluation import (
    aggregate_checkrules,
    coverage_metrics,
    entropy_report,
)
from .extraction import (
    DEFAULT_EXTRACTION_MODEL,
    DEFAULT_N_MAX,
    ReflectionTrace,
    build_mode,
    extract_chunks,
    union_document,
)
from .gateway import (
    ENV_BASE_URL,
    MODE_LIVE,
    MODE_RECORD,
    MODE_REPLAY,
    HttpChatTransport,
    LlmGateway,
    LlmRequest,
    ReplayStore,
    Shape,
)
from .judging import (
    ALL_METRICS,
    DEFAULT_JUDGE_MODEL,
    DEFAULT_JUDGE_TEMPERATURE,
    JudgeConfig,
    aggregate_judge,
    run_comparison,
    write_outcomes_jsonl,
)
from .model import (
    ALL_MODES,
    MODE_REFLECTION,
    Chunk,
    Document,
    LabelDef,
    Schema,
    Triple,
    TripleSet,
    read_triples_jsonl,
    write_triples_jsonl,
)

STAGE_PENDING = "pending"
STAGE_DONE = "done"
STAGE_FAILED = "failed"

STAGE_CHUNK = "chunk"
STAGE_JUDGE = "judge"
STAGE_REPORT = "report"

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(Exception):
    """Configuration is unusable; maps to CLI exit code 2."""


def _interpolate_env(value):
    """Replace ${NAME} in every string of a JSON-like structure."""
    if isinstance(value, str):
        def sub(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return os.environ[name]

        return _ENV_PATTERN.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate_env(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate_env(v) for v in value]
    return value


@dataclass(frozen=True)
class GatewaySettings:
    """How LLM calls are made: live HTTP, record-through, or replay."""

    mode: str = MODE_REPLAY
    store: str = ""
    base_url: str = ""
    api_key: str = ""
    max_in_flight: int = 4
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.mode not in (MODE_LIVE, MODE_RECORD, MODE_REPLAY):
            raise ConfigError(f"unknown gateway mode {self.mode!r}")
        if self.mode in (MODE_RECORD, MODE_REPLAY) and not self.store:
            raise ConfigError(f"gateway mode {self.mode!r} requires a store path")
        if self.mode == MODE_REPLAY and not Path(self.store).is_dir():
            raise ConfigError(f"replay store {self.store} does not exist")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")


@dataclass(frozen=True)
class ExtractionSettings:
    model: str = DEFAULT_EXTRACTION_MODEL
    temperature: float = 0.0
    max_output_tokens: int = 4096
    n_max: int = DEFAULT_N_MAX

    def __post_init__(self) -> None:
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1")


@dataclass(frozen=True)
class JudgeSettings:
    model: str = DEFAULT_JUDGE_MODEL
    temperature: float = DEFAULT_JUDGE_TEMPERATURE
    metrics: tuple[str, ...] = ALL_METRICS
    n_votes: int = 3

    def __post_init__(self) -> None:
        bad = [m for m in self.metrics if m not in ALL_METRICS]
        if bad:
            raise ConfigError(f"unknown judge metrics {bad}")
        if self.n_votes != 3:
            raise ConfigError("judge n_votes must be 3")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; paths are absolute after loading."""

    inputs: tuple[str, ...]
    out_dir: str
    modes: tuple[str, ...] = ALL_MODES
    schema_path: str = ""
    chunk_max_tokens: int = 2048
    token_estimator: str = ESTIMATOR_CHARS
    gateway: GatewaySettings = GatewaySettings(mode=MODE_LIVE)
    extraction: ExtractionSettings = ExtractionSettings()
    judge: JudgeSettings = JudgeSettings()

    def __post_init__(self) -> None:
        if not self.inputs:
            raise ConfigError("config lists no input documents")
        if not self.modes:
            raise ConfigError("config lists no extraction modes")
        bad = [m for m in self.modes if m not in ALL_MODES]
        if bad:
            raise ConfigError(f"unknown extraction modes {bad}")
        if len(set(self.modes)) != len(self.modes):
            raise ConfigError("duplicate extraction modes")
        if not self.out_dir:
            raise ConfigError("config has no output directory")
        if self.token_estimator not in (ESTIMATOR_CHARS, ESTIMATOR_WORDS):
            raise ConfigError(f"unknown token estimator {self.token_estimator!r}")
        missing = [p for p in self.inputs if not Path(p).is_file()]
        if missing:
            raise ConfigError(f"input files not found: {missing}")
        if self.schema_path and not Path(self.schema_path).is_file():
            raise ConfigError(f"schema file not found: {self.schema_path}")

    def snapshot(self) -> dict:
        """JSON form of the config, in the same shape as a config file.

        Feeds the manifest and the run id, and round-trips through
        config_from_dict so a run directory can reconstruct its config.
        The api key is deliberately absent.
        """
        return {
            "inputs": list(self.inputs),
            "out_dir": self.out_dir,
            "modes": list(self.modes),
            "schema": self.schema_path,
            "chunk": {
                "max_tokens": self.chunk_max_tokens,
                "token_estimator": self.token_estimator,
            },
            "gateway": {
                "mode": self.gateway.mode,
                "store": self.gateway.store,
                "base_url": self.gateway.base_url,
                "max_in_flight": self.gateway.max_in_flight,
                "max_retries": self.gateway.max_retries,
            },
            "extraction": {
                "model": self.extraction.model,
                "temperature": self.extraction.temperature,
                "max_output_tokens": self.extraction.max_output_tokens,
                "n_max": self.extraction.n_max,
            },
            "judge": {
                "model": self.judge.model,
                "temperature": self.judge.temperature,
                "metrics": list(self.judge.metrics),
                "n_votes": self.judge.n_votes,
            },
        }

    @property
    def run_id(self) -> str:
        # The output directory is where the run lands, not what it computes;
        # the api key is a secret. Neither may influence the id.
        material = self.snapshot()
        del material["out_dir"]
        blob = json.dumps(material, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _require(d: Mapping, key: str, ctx: str):
    if key not in d:
        raise ConfigError(f"{ctx} is missing required key {key!r}")
    return d[key]


def config_from_dict(raw: Mapping, base_dir: str | Path = ".") -> RunConfig:
    """Build a RunConfig from parsed JSON, resolving paths against base_dir."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a JSON object")
    raw = _interpolate_env(dict(raw))
    base = Path(base_dir)

    def resolve(p: str) -> str:
        return str((base / p).resolve()) if p else ""

    inputs = _require(raw, "inputs", "config")
    if not isinstance(inputs, list) or not all(isinstance(p, str) for p in inputs):
        raise ConfigError("config inputs must be a list of paths")

    gw = dict(raw.get("gateway", {}))
    ex = dict(raw.get("extraction", {}))
    ju = dict(raw.get("judge", {}))
    ch = dict(raw.get("chunk", {}))
    known = {"inputs", "out_dir", "modes", "schema", "gateway", "extraction", "judge", "chunk"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")

    try:
        return RunConfig(
            inputs=tuple(resolve(p) for p in inputs),
            out_dir=resolve(_require(raw, "out_dir", "config")),
            modes=tuple(raw.get("modes", list(ALL_MODES))),
            schema_path=resolve(raw.get("schema", "")),
            chunk_max_tokens=int(ch.get("max_tokens", 2048)),
            token_estimator=ch.get("token_estimator", ESTIMATOR_CHARS),
            gateway=GatewaySettings(
                mode=gw.get("mode", MODE_LIVE),
                store=resolve(gw.get("store", "")),
                base_url=gw.get("base_url", ""),
                api_key=gw.get("api_key", ""),
                max_in_flight=int(gw.get("max_in_flight", 4)),
                max_retries=int(gw.get("max_retries", 2)),
            ),
            extraction=ExtractionSettings(
                model=ex.get("model", DEFAULT_EXTRACTION_MODEL),
                temperature=float(ex.get("temperature", 0.0)),
                max_output_tokens=int(ex.get("max_output_tokens", 4096)),
                n_max=int(ex.get("n_max", DEFAULT_N_MAX)),
            ),
            judge=JudgeSettings(
                model=ju.get("model", DEFAULT_JUDGE_MODEL),
                temperature=float(ju.get("temperature", DEFAULT_JUDGE_TEMPERATURE)),
                metrics=tuple(ju.get("metrics", list(ALL_METRICS))),
                n_votes=int(ju.get("n_votes", 3)),
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent)


DEFAULT_SCHEMA_RESOURCE = "default.json"


def load_schema(path: str | Path | None = None) -> Schema:
    """Parse a schema file; with no path, the bundled default ships.

    The file shape is ``{schema_id, entity_types: [{label, definition}],
    relation_types: [...], ticker_map: {alias: ticker}}``.
    """
    if path is None or path == "":
        from importlib import resources

        text = (
            resources.files("finkg").joinpath("schemas", DEFAULT_SCHEMA_RESOURCE).read_text("utf-8")
        )
        origin = f"bundled {DEFAULT_SCHEMA_RESOURCE}"
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read schema {path}: {exc}") from exc
        origin = str(path)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"schema {origin} is not valid JSON: {exc}") from exc

    def defs(key: str) -> tuple[LabelDef, ...]:
        rows = raw.get(key)
        if not isinstance(rows, list):
            raise ConfigError(f"schema {origin} is missing the {key} list")
        out = []
        for row in rows:
            if not isinstance(row, dict) or "label" not in row or "definition" not in row:
                raise ConfigError(f"schema {origin}: every {key} row needs label and definition")
            if not str(row["definition"]).strip():
                raise ConfigError(f"schema {origin}: {row['label']!r} has no definition")
            out.append(LabelDef(label=str(row["label"]), definition=str(row["definition"])))
        return tuple(out)

    try:
        return Schema(
            entity_types=defs("entity_types"),
            relation_types=defs("relation_types"),
            ticker_map=dict(raw.get("ticker_map", {})),
            schema_id=str(raw.get("schema_id", "default")),
        )
    except ValueError as exc:
        raise ConfigError(f"schema {origin}: {exc}") from exc


SCHEMA_PROPOSAL_SHAPE = Shape(
    kind="object", required=("entity_types", "relation_types")
)


def propose_schema(
    sample_chunks: Sequence[Chunk],
    gateway: LlmGateway,
    out_path: str | Path,
    model: str = DEFAULT_EXTRACTION_MODEL,
    max_chars: int = 24000,
) -> Path:
    """Draft a schema from sample text for human review; never auto-activated.

    The draft lands at out_path and nothing else reads it unless a person
    passes it back in via --schema.
    """
    if not sample_chunks:
        raise ValueError("schema proposal requires at least one sample chunk")
    from .extraction import SYSTEM_EXTRACT, load_prompt, render_prompt

    samples = "\n\n---\n\n".join(c.text for c in sample_chunks)[:max_chars]
    prompt = render_prompt(load_prompt("schema_proposal"), samples=samples)
    req = LlmRequest(
        model=model,
        system_prompt=SYSTEM_EXTRACT,
        user_prompt=prompt,
        temperature=0.0,
        max_output_tokens=4096,
        request_tag="schema.proposal",
    )
    value, _ = gateway.complete_json(req, SCHEMA_PROPOSAL_SHAPE)
    draft = {
        "schema_id": str(value.get("schema_id", "draft-for-review")),
        "entity_types": value["entity_types"],
        "relation_types": value["relation_types"],
        "ticker_map": value.get("ticker_map", {}),
    }
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out_path, draft)
    return out_path


@dataclass
class StageRecord:
    """One pipeline stage's status and the hashes of what it wrote."""

    name: str
    status: str = STAGE_PENDING
    outputs: dict[str, str] = field(default_factory=dict)
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "outputs": dict(sorted(self.outputs.items())),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageRecord":
        return cls(
            name=d["name"],
            status=d.get("status", STAGE_PENDING),
            outputs=dict(d.get("outputs", {})),
            error=d.get("error", ""),
        )


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Durable record of a run: config snapshot, stage states, file hashes."""

    run_id: str
    config: dict
    input_hashes: dict[str, str]
    stages: dict[str, StageRecord]
    created_at: str = ""
    updated_at: str = ""

    MANIFEST_NAME = "manifest.json"

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "config": self.config,
            "input_hashes": dict(sorted(self.input_hashes.items())),
            "stages": [self.stages[n].to_dict() for n in self.stages],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunManifest":
        stages = {s["name"]: StageRecord.from_dict(s) for s in d.get("stages", [])}
        return cls(
            run_id=d["run_id"],
            config=dict(d.get("config", {})),
            input_hashes=dict(d.get("input_hashes", {})),
            stages=stages,
            created_at=d.get("created_at", ""),
            updated_at=d.get("updated_at", ""),
        )

    def save(self, run_dir: str | Path) -> None:
        self.updated_at = _utc_now()
        _write_json(Path(run_dir) / self.MANIFEST_NAME, self.to_dict())

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / cls.MANIFEST_NAME
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def stage(self, name: str) -> StageRecord:
        return self.stages[name]

    def stage_is_current(self, name: str, run_dir: Path) -> bool:
        """Done, and every recorded output still exists with its hash."""
        rec = self.stages.get(name)
        if rec is None or rec.status != STAGE_DONE:
            return False
        if not rec.outputs:
            return False
        for rel, digest in rec.outputs.items():
            path = run_dir / rel
            if not path.is_file() or file_sha256(path) != digest:
                return False
        return True

    def ok(self) -> bool:
        return all(s.status == STAGE_DONE for s in self.stages.values())


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")


def build_plan(config: RunConfig) -> list[str]:
    """Stage names in execution order for this config."""
    plan = [STAGE_CHUNK]
    plan += [f"extract.{m}" for m in config.modes]
    plan += [f"evaluate.{m}" for m in config.modes]
    if set(config.modes) == set(ALL_MODES) and config.judge.metrics:
        plan.append(STAGE_JUDGE)
    plan.append(STAGE_REPORT)
    return plan


def stage_dependencies(config: RunConfig) -> dict[str, list[str]]:
    deps: dict[str, list[str]] = {STAGE_CHUNK: []}
    for m in config.modes:
        deps[f"extract.{m}"] = [STAGE_CHUNK]
        deps[f"evaluate.{m}"] = [f"extract.{m}"]
    plan = build_plan(config)
    if STAGE_JUDGE in plan:
        deps[STAGE_JUDGE] = [f"extract.{m}" for m in config.modes]
    deps[STAGE_REPORT] = [f"evaluate.{m}" for m in config.modes] + (
        [STAGE_JUDGE] if STAGE_JUDGE in plan else []
    )
    return deps


def select_with_dependencies(config: RunConfig, targets: Sequence[str]) -> list[str]:
    """Expand requested stages to include everything they depend on."""
    plan = build_plan(config)
    deps = stage_dependencies(config)
    unknown = [t for t in targets if t not in plan]
    if unknown:
        raise ConfigError(f"stages {unknown} are not part of this run's plan {plan}")
    wanted: set[str] = set()

    def add(name: str) -> None:
        if name in wanted:
            return
        wanted.add(name)
        for d in deps[name]:
            add(d)

    for t in targets:
        add(t)
    return [s for s in plan if s in wanted]


def build_gateway(settings: GatewaySettings, transport=None) -> LlmGateway:
    """Assemble the shared LLM client; ``transport`` overrides HTTP dialing."""
    store = ReplayStore(settings.store) if settings.store else None
    if transport is None and settings.mode in (MODE_LIVE, MODE_RECORD):
        base_url = settings.base_url or os.environ.get(ENV_BASE_URL, "")
        if not base_url:
            raise ConfigError(
                f"gateway mode {settings.mode!r} needs base_url or {ENV_BASE_URL}"
            )
        api_key = settings.api_key or os.environ.get("FINKG_LLM_API_KEY", "")
        transport = HttpChatTransport(base_url=base_url, api_key=api_key)
    return LlmGateway(
        mode=settings.mode,
        store=store,
        transport=transport,
        max_retries=settings.max_retries,
        max_in_flight=settings.max_in_flight,
    )


class RunContext:
    """Per-run lazily built shared state handed to stage functions."""

    def __init__(self, config: RunConfig, run_dir: Path, transport=None):
        self.config = config
        self.run_dir = run_dir
        self.events = EventLog()
        self._transport = transport
        self._schema: Schema | None = None
        self._gateway: LlmGateway | None = None

    @property
    def schema(self) -> Schema:
        if self._schema is None:
            self._schema = load_schema(self.config.schema_path or None)
        return self._schema

    @property
    def gateway(self) -> LlmGateway:
        if self._gateway is None:
            self._gateway = build_gateway(self.config.gateway, self._transport)
        return self._gateway


def _doc_id_for(path: str) -> str:
    return Path(path).stem


def _section_index_for(path: str) -> list[tuple[int, str]] | None:
    """Read heading offsets from an ingest sidecar manifest, if present."""
    sidecar = Path(path).with_suffix(".manifest.json")
    if not sidecar.is_file():
        return None
    try:
        raw = json.loads(sidecar.read_text(encoding="utf-8"))
        sections = raw.get("section_index", [])
        index = [(int(s["char_start"]), str(s["title"])) for s in sections]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError):
        return None
    return sorted(index)


def _chunk_file(run_dir: Path, doc_id: str) -> Path:
    return run_dir / "chunks" / f"{doc_id}.chunks.jsonl"


def _stage_chunk(ctx: RunContext) -> list[str]:
    config = ChunkConfig(
        max_tokens=ctx.config.chunk_max_tokens,
        token_estimator=ctx.config.token_estimator,
    )
    outputs: list[str] = []
    seen: set[str] = set()
    for path in ctx.config.inputs:
        doc_id = _doc_id_for(path)
        if doc_id in seen:
            raise ValueError(f"duplicate document id {doc_id!r} across inputs")
        seen.add(doc_id)
        markdown = Path(path).read_text(encoding="utf-8")
        doc = Document(
            doc_id=doc_id, company_ticker="", source_path=path, markdown=markdown
        )
        result = chunk_document(doc, config, section_index=_section_index_for(path))
        for w in result.warnings:
            ctx.events.emit("chunk_warning", f"{w.kind}: {w.message}", chunk_id=w.chunk_id)
        out = _chunk_file(ctx.run_dir, doc_id)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            for c in result.chunks:
                fh.write(json.dumps(c.to_record(), ensure_ascii=False) + "\n")
        outputs.append(str(out.relative_to(ctx.run_dir)))
    return outputs


def _load_chunks(ctx: RunContext) -> list[Chunk]:
    chunks: list[Chunk] = []
    for path in ctx.config.inputs:
        chunk_file = _chunk_file(ctx.run_dir, _doc_id_for(path))
        with open(chunk_file, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    chunks.append(Chunk.from_record(json.loads(line)))
    return chunks


def _trace_record(trace: ReflectionTrace) -> dict:
    return {
        "chunk_id": trace.chunk_id,
        "stop_reason": trace.stop_reason,
        "n_max": trace.n_max,
        "stopping_step": trace.stopping_step,
        "sets": [[t.to_record() for t in s] for s in trace.sets],
        "feedback": [r.to_record() for r in trace.feedback],
    }


def _stage_extract(ctx: RunContext, mode_name: str) -> list[str]:
    chunks = _load_chunks(ctx)
    mode = build_mode(
        mode_name,
        model=ctx.config.extraction.model,
        temperature=ctx.config.extraction.temperature,
        max_output_tokens=ctx.config.extraction.max_output_tokens,
    )
    batch = extract_chunks(
        chunks,
        ctx.schema,
        mode,
        ctx.gateway,
        n_max=ctx.config.extraction.n_max,
        events=ctx.events,
        max_workers=ctx.config.gateway.max_in_flight,
    )
    triples_path = ctx.run_dir / "triples" / f"triples.{mode_name}.jsonl"
    triples_path.parent.mkdir(parents=True, exist_ok=True)
    write_triples_jsonl(triples_path, (t for s in batch.sets for t in s))
    outputs = [str(triples_path.relative_to(ctx.run_dir))]

    # Document-level union: group per-chunk sets by their doc id prefix.
    by_doc: dict[str, list[TripleSet]] = {}
    for s in batch.sets:
        by_doc.setdefault(s.chunk_id.split(":", 1)[0], []).append(s)
    union_path = ctx.run_dir / "triples" / f"union.{mode_name}.jsonl"
    unions: list[Triple] = []
    for path in ctx.config.inputs:
        doc_id = _doc_id_for(path)
        if doc_id in by_doc:
            unions.extend(union_document(by_doc[doc_id], doc_id=doc_id))
    write_triples_jsonl(union_path, unions)
    outputs.append(str(union_path.relative_to(ctx.run_dir)))

    if mode_name == MODE_REFLECTION:
        trace_path = ctx.run_dir / "traces" / "trace.reflection.jsonl"
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
            for trace in batch.traces:
                fh.write(json.dumps(_trace_record(trace), ensure_ascii=False) + "\n")
        outputs.append(str(trace_path.relative_to(ctx.run_dir)))
    return outputs


def _sets_per_chunk(chunks: Sequence[Chunk], triples: Sequence[Triple], mode: str):
    by_chunk: dict[str, list[Triple]] = {}
    for t in triples:
        by_chunk.setdefault(t.chunk_id, []).append(t)
    return [
        TripleSet(triples=tuple(by_chunk.get(c.chunk_id, ())), chunk_id=c.chunk_id, mode=mode)
        for c in chunks
    ]


def _stage_evaluate(ctx: RunContext, mode_name: str) -> list[str]:
    chunks = _load_chunks(ctx)
    triples = read_triples_jsonl(ctx.run_dir / "triples" / f"triples.{mode_name}.jsonl")
    per_chunk = _sets_per_chunk(chunks, triples, mode_name)
    payload = {
        "mode": mode_name,
        "chunk_count": len(chunks),
        "triple_count": len(triples),
        "checkrules": aggregate_checkrules(triples, ctx.schema).to_dict(),
        "coverage": coverage_metrics(per_chunk, ctx.schema).to_dict() if per_chunk else None,
        "entropy": entropy_report(triples, ctx.schema).to_dict() if triples else None,
    }
    out = ctx.run_dir / "eval" / f"report.intrinsic.{mode_name}.json"
    _write_json(out, payload)
    return [str(out.relative_to(ctx.run_dir))]


def _stage_judge(ctx: RunContext) -> list[str]:
    chunks = _load_chunks(ctx)
    per_mode: dict[str, list[TripleSet]] = {}
    for m in ctx.config.modes:
        triples = read_triples_jsonl(ctx.run_dir / "triples" / f"triples.{m}.jsonl")
        per_mode[m] = _sets_per_chunk(chunks, triples, m)

    judge_config = JudgeConfig(
        model=ctx.config.judge.model,
        temperature=ctx.config.judge.temperature,
        metrics=ctx.config.judge.metrics,
        n_votes=ctx.config.judge.n_votes,
    )
    tasks = []
    for i, chunk in enumerate(chunks):
        outputs = [per_mode[m][i] for m in ctx.config.modes]
        if all(len(s) == 0 for s in outputs):
            ctx.events.emit(
                "judge_skipped", "all candidate sets are empty", chunk_id=chunk.chunk_id
            )
            continue
        for metric in judge_config.metrics:
            tasks.append((chunk, outputs, metric))

    def compare(task):
        chunk, outputs, metric = task
        return run_comparison(chunk, outputs, metric, ctx.gateway, judge_config, ctx.events)

    # Comparisons fan out; votes inside each stay sequential for the early
    # majority short-circuit. pool.map keeps outcome order deterministic.
    with concurrent.futures.ThreadPoolExecutor(
        max_workers=ctx.config.gateway.max_in_flight
    ) as pool:
        outcomes = list(pool.map(compare, tasks))

    outcomes_path = ctx.run_dir / "judge" / "judge.outcomes.jsonl"
    outcomes_path.parent.mkdir(parents=True, exist_ok=True)
    write_outcomes_jsonl(outcomes_path, outcomes)
    report_path = ctx.run_dir / "judge" / "report.judge.json"
    _write_json(report_path, aggregate_judge(outcomes).to_dict())
    return [
        str(outcomes_path.relative_to(ctx.run_dir)),
        str(report_path.relative_to(ctx.run_dir)),
    ]


def _fmt(value, digits: int = 4) -> str:
    if value is None:
        return "n/a"
    return f"{value:.{digits}f}"


def _md_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = [
        "| " + " | ".join(headers) + " |",
        "| " + " | ".join("---" for _ in headers) + " |",
    ]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines)


def _stage_report(ctx: RunContext) -> list[str]:
    intrinsic: dict[str, dict] = {}
    for m in ctx.config.modes:
        path = ctx.run_dir / "eval" / f"report.intrinsic.{m}.json"
        intrinsic[m] = json.loads(path.read_text(encoding="utf-8"))
    judge_path = ctx.run_dir / "judge" / "report.judge.json"
    judge = json.loads(judge_path.read_text(encoding="utf-8")) if judge_path.is_file() else None

    doc_count = len(ctx.config.inputs)
    chunk_count = next(iter(intrinsic.values()))["chunk_count"] if intrinsic else 0
    lines: list[str] = []
    lines.append("# Knowledge graph extraction report")
    lines.append("")
    lines.append(f"Run `{ctx.config.run_id}`: {doc_count} document(s), "
                 f"{chunk_count} chunk(s), modes: {', '.join(ctx.config.modes)}.")
    lines.append("")

    lines.append("## Triple volume and coverage")
    lines.append("")
    rows = []
    for m in ctx.config.modes:
        cov = intrinsic[m].get("coverage") or {}
        rows.append([
            m,
            str(intrinsic[m]["triple_count"]),
            _fmt(cov.get("triples_per_chunk")),
            _fmt(cov.get("ecr")),
            _fmt(cov.get("tcr")),
            _fmt(cov.get("tcr_n")),
            _fmt(cov.get("rcr")),
            _fmt(cov.get("rcr_n")),
        ])
    lines.append(_md_table(
        ["Mode", "Triples", "Triples/Chunk", "ECR", "TCR", "TCR-N", "RCR", "RCR-N"], rows
    ))
    lines.append("")

    lines.append("## Rule compliance")
    lines.append("")
    rule_headers = ["Mode", "Subject ref %", "Entity len %", "Entity schema %",
                    "Relation schema %", "Mean CR"]
    rows = []
    for m in ctx.config.modes:
        cr = intrinsic[m]["checkrules"]
        rates = cr["per_rule_pass_rate"]
        rows.append([
            m,
            _fmt(rates.get("subject_reference"), 2),
            _fmt(rates.get("entity_length"), 2),
            _fmt(rates.get("entity_schema"), 2),
            _fmt(rates.get("relation_schema"), 2),
            _fmt(cr.get("mean_score")),
        ])
    lines.append(_md_table(rule_headers, rows))
    lines.append("")
    lines.append("Share of triples passing at least k of the 4 rules:")
    lines.append("")
    rows = []
    for m in ctx.config.modes:
        alk = intrinsic[m]["checkrules"]["at_least_k"]
        rows.append([m] + [_fmt(alk[f"at_least_{k}"], 2) for k in (1, 2, 3, 4)])
    lines.append(_md_table(["Mode", ">=1 %", ">=2 %", ">=3 %", "=4 %"], rows))
    lines.append("")

    lines.append("## Diversity (entropy, bits)")
    lines.append("")
    rows = []
    for m in ctx.config.modes:
        ent = intrinsic[m].get("entropy")
        if ent is None:
            rows.append([m] + ["n/a"] * 7)
            continue
        rows.append([
            m,
            _fmt(ent["shannon"].get("entity")),
            _fmt(ent["shannon"].get("entity_type")),
            _fmt(ent["shannon"].get("relation")),
            _fmt(ent["normalized"].get("entity_type")),
            _fmt(ent["normalized"].get("relation")),
            _fmt(ent["renyi2"].get("entity_type")),
            _fmt(ent["renyi2"].get("relation")),
        ])
    lines.append(_md_table(
        ["Mode", "H(E)", "H(T)", "H(R)", "Hn(T)", "Hn(R)", "H2(T)", "H2(R)"], rows
    ))
    lines.append("")

    if judge is not None and not judge.get("empty", False):
        lines.append("## Judge win rates (%)")
        lines.append("")
        rows = []
        for metric, rates in judge["win_rate"].items():
            rows.append([
                metric,
                *[_fmt(rates.get(m, 0.0), 2) for m in ctx.config.modes],
                _fmt(judge["unresolved_rate"].get(metric, 0.0), 2),
            ])
        lines.append(_md_table(["Metric", *ctx.config.modes, "Unresolved"], rows))
        lines.append("")
        lines.append("## Judge agreement")
        lines.append("")
        rows = [
            [metric, _fmt(judge["agreement"][metric]), str(judge["outcome_count"][metric])]
            for metric in judge["agreement"]
        ]
        lines.append(_md_table(["Metric", "Unanimous fraction", "Comparisons"], rows))
        lines.append("")

    out = ctx.run_dir / "report.md"
    out.write_text("\n".join(lines), encoding="utf-8", newline="\n")
    return [str(out.relative_to(ctx.run_dir))]


def _execute_stage(ctx: RunContext, name: str) -> list[str]:
    if name == STAGE_CHUNK:
        return _stage_chunk(ctx)
    if name.startswith("extract."):
        return _stage_extract(ctx, name.split(".", 1)[1])
    if name.startswith("evaluate."):
        return _stage_evaluate(ctx, name.split(".", 1)[1])
    if name == STAGE_JUDGE:
        return _stage_judge(ctx)
    if name == STAGE_REPORT:
        return _stage_report(ctx)
    raise ValueError(f"unknown stage {name!r}")


def _input_hashes(config: RunConfig) -> dict[str, str]:
    hashes = {p: file_sha256(p) for p in config.inputs}
    if config.schema_path:
        hashes[config.schema_path] = file_sha256(config.schema_path)
    return hashes


def run_pipeline(
    config: RunConfig,
    select: Sequence[str] | None = None,
    run_dir: str | Path | None = None,
    transport=None,
) -> RunManifest:
    """Execute the staged pipeline, resuming past work that still hashes clean.

    ``select`` restricts execution to the named stages (dependencies are
    honored for skip/blocked decisions but not auto-added; use
    select_with_dependencies for that). A stage failure marks the stage
    failed and leaves dependents pending. ``transport`` replaces the HTTP
    client in live/record mode, for embedding and testing.
    """
    run_dir = Path(run_dir) if run_dir is not None else Path(config.out_dir) / config.run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    plan = build_plan(config)
    deps = stage_dependencies(config)
    to_run = list(plan) if select is None else list(select)
    unknown = [s for s in to_run if s not in plan]
    if unknown:
        raise ConfigError(f"stages {unknown} are not part of this run's plan {plan}")

    input_hashes = _input_hashes(config)
    manifest: RunManifest | None = None
    manifest_path = run_dir / RunManifest.MANIFEST_NAME
    if manifest_path.is_file():
        try:
            manifest = RunManifest.load(run_dir)
        except (json.JSONDecodeError, KeyError):
            manifest = None
    if manifest is not None and (
        manifest.input_hashes != input_hashes or manifest.config != config.snapshot()
    ):
        manifest = None  # inputs or config changed; prior stage states are void
    if manifest is None:
        manifest = RunManifest(
            run_id=config.run_id,
            config=config.snapshot(),
            input_hashes=input_hashes,
            stages={},
            created_at=_utc_now(),
        )
    for name in plan:
        if name not in manifest.stages:
            manifest.stages[name] = StageRecord(name=name)
    manifest.stages = {name: manifest.stages[name] for name in plan}

    ctx = RunContext(config, run_dir, transport=transport)
    for name in plan:
        rec = manifest.stage(name)
        if name not in to_run:
            continue
        if manifest.stage_is_current(name, run_dir):
            continue
        blocked = [
            d for d in deps[name] if not manifest.stage_is_current(d, run_dir)
        ]
        if blocked:
            rec.status = STAGE_PENDING
            rec.error = f"blocked by {', '.join(blocked)}"
            manifest.save(run_dir)
            continue
        rec.status = STAGE_PENDING
        rec.error = ""
        rec.outputs = {}
        try:
            written = _execute_stage(ctx, name)
        except Exception as exc:  # noqa: BLE001 - the manifest records the cause
            rec.status = STAGE_FAILED
            rec.error = f"{type(exc).__name__}: {exc}"
            ctx.events.emit("stage_failed", rec.error, mode=name)
            manifest.save(run_dir)
            continue
        rec.outputs = {rel: file_sha256(run_dir / rel) for rel in written}
        rec.status = STAGE_DONE
        manifest.save(run_dir)

    ctx.events.write_jsonl(run_dir / "errors.jsonl")
    manifest.save(run_dir)
    return manifest
