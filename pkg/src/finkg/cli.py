"""Command line entry point.

Verbs map onto pipeline stages: ``run`` executes everything, the others
execute one stage family (plus whatever it depends on, reusing anything
already done). ``ingest`` shells out to the document adapter named by
FINKG_INGEST_CMD so source formats stay out of this package.

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import subprocess
import sys
from pathlib import Path

from .gateway import MODE_RECORD, MODE_REPLAY
from .model import ALL_MODES
from .pipeline import (
    ConfigError,
    RunConfig,
    RunManifest,
    STAGE_DONE,
    build_plan,
    config_from_dict,
    load_config,
    run_pipeline,
    select_with_dependencies,
)

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2

ENV_INGEST_CMD = "FINKG_INGEST_CMD"


def _add_common_flags(parser: argparse.ArgumentParser, with_run: bool = False) -> None:
    parser.add_argument("--config", help="run configuration JSON file")
    if with_run:
        parser.add_argument("--run", help="existing run directory to operate on")
    parser.add_argument("--schema", help="override the schema file")
    parser.add_argument("--replay", metavar="DIR", help="replay LLM responses from DIR")
    parser.add_argument(
        "--record", action="store_true", help="record live LLM responses into the store"
    )
    parser.add_argument("--out", help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="finkg",
        description="Construct and evaluate knowledge-graph triples from filings.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    ingest = sub.add_parser("ingest", help="convert a source document to markdown")
    ingest.add_argument("--source", required=True)
    ingest.add_argument("--doc-id", required=True)
    ingest.add_argument("--ticker", default="")
    ingest.add_argument("--out", required=True)

    for verb, help_text in (
        ("chunk", "split input documents into chunks"),
        ("extract", "run one extraction mode over the chunks"),
        ("evaluate", "compute rule, coverage, and entropy reports"),
        ("judge", "run the three-way comparative judge"),
        ("report", "render the combined markdown report"),
        ("run", "run every stage"),
    ):
        p = sub.add_parser(verb, help=help_text)
        _add_common_flags(p, with_run=verb in ("evaluate", "judge", "report"))
        if verb == "extract":
            p.add_argument("--mode", required=True, choices=ALL_MODES)
        if verb == "evaluate":
            p.add_argument("--mode", choices=ALL_MODES)
        if verb == "judge":
            p.add_argument("--metrics", help="comma-separated judge metrics")
            p.add_argument("--votes", type=int, default=3)
    return parser


def _config_from_args(args: argparse.Namespace) -> tuple[RunConfig, Path | None]:
    """Resolve the effective config and, for --run, the run directory."""
    run_dir: Path | None = None
    if getattr(args, "run", None):
        if args.config:
            raise ConfigError("--config and --run are mutually exclusive")
        run_dir = Path(args.run)
        manifest_path = run_dir / RunManifest.MANIFEST_NAME
        if not manifest_path.is_file():
            raise ConfigError(f"{run_dir} has no {RunManifest.MANIFEST_NAME}")
        snapshot = json.loads(manifest_path.read_text(encoding="utf-8")).get("config", {})
        config = config_from_dict(snapshot, base_dir=".")
    elif args.config:
        config = load_config(args.config)
    else:
        raise ConfigError("one of --config or --run is required")

    overrides = {}
    if getattr(args, "schema", None):
        overrides["schema_path"] = str(Path(args.schema).resolve())
    if getattr(args, "out", None):
        if run_dir is not None:
            raise ConfigError("--out cannot be combined with --run")
        overrides["out_dir"] = str(Path(args.out).resolve())
    gw = config.gateway
    if getattr(args, "replay", None) and getattr(args, "record", False):
        raise ConfigError("--replay and --record are mutually exclusive")
    if getattr(args, "replay", None):
        from .pipeline import GatewaySettings

        gw = GatewaySettings(
            mode=MODE_REPLAY,
            store=str(Path(args.replay).resolve()),
            max_in_flight=gw.max_in_flight,
            max_retries=gw.max_retries,
        )
        overrides["gateway"] = gw
    elif getattr(args, "record", False):
        from .pipeline import GatewaySettings

        if not gw.store:
            raise ConfigError("--record needs a gateway store path in the config")
        gw = GatewaySettings(
            mode=MODE_RECORD,
            store=gw.store,
            base_url=gw.base_url,
            api_key=gw.api_key,
            max_in_flight=gw.max_in_flight,
            max_retries=gw.max_retries,
        )
        overrides["gateway"] = gw
    if getattr(args, "metrics", None) or getattr(args, "votes", None) not in (None, 3):
        from .pipeline import JudgeSettings

        metrics = (
            tuple(m.strip() for m in args.metrics.split(",") if m.strip())
            if getattr(args, "metrics", None)
            else config.judge.metrics
        )
        overrides["judge"] = JudgeSettings(
            model=config.judge.model,
            temperature=config.judge.temperature,
            metrics=metrics,
            n_votes=args.votes if getattr(args, "votes", None) else 3,
        )

    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    return config, run_dir


def _targets_for(args: argparse.Namespace, config: RunConfig) -> list[str] | None:
    if args.verb == "run":
        return None
    if args.verb == "chunk":
        return ["chunk"]
    if args.verb == "extract":
        return [f"extract.{args.mode}"]
    if args.verb == "evaluate":
        modes = [args.mode] if getattr(args, "mode", None) else list(config.modes)
        return [f"evaluate.{m}" for m in modes]
    if args.verb == "judge":
        return ["judge"]
    if args.verb == "report":
        return ["report"]
    raise ConfigError(f"unknown verb {args.verb!r}")


def _run_ingest(args: argparse.Namespace) -> int:
    command = os.environ.get(ENV_INGEST_CMD, "")
    if not command:
        print(
            f"config error: {ENV_INGEST_CMD} is not set; point it at the "
            "ingest adapter command (e.g. 'node ingest/dist/cli.js')",
            file=sys.stderr,
        )
        return EXIT_CONFIG_ERROR
    argv = shlex.split(command) + [
        "--source", args.source,
        "--doc-id", args.doc_id,
        "--out", args.out,
    ]
    if args.ticker:
        argv += ["--ticker", args.ticker]
    try:
        proc = subprocess.run(argv, check=False)
    except OSError as exc:
        print(f"config error: cannot launch ingest adapter: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    return EXIT_OK if proc.returncode == 0 else EXIT_STAGE_FAILURE


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "ingest":
        return _run_ingest(args)
    try:
        config, run_dir = _config_from_args(args)
        targets = _targets_for(args, config)
        select = None if targets is None else select_with_dependencies(config, targets)
        manifest = run_pipeline(config, select=select, run_dir=run_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    checked = select if select is not None else build_plan(config)
    bad = [n for n in checked if manifest.stage(n).status != STAGE_DONE]
    run_path = run_dir if run_dir is not None else Path(config.out_dir) / config.run_id
    if bad:
        for name in bad:
            rec = manifest.stage(name)
            detail = rec.error or rec.status
            print(f"stage {name}: {detail}", file=sys.stderr)
        print(f"run directory: {run_path}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    print(f"run directory: {run_path}")
    for name in checked:
        print(f"stage {name}: done")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
