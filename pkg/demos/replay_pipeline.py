"""Record a pipeline run against a scripted model, then replay it.

The gateway never needs a live endpoint here. A small scripted stand-in
answers every request the three extraction workflows and the judge can
make, the record run captures those replies into a store, and the two
replay runs rebuild everything from the store alone. The point of the
exercise: replayed artifacts are byte-identical, run to run.

Run it with:  python3 demos/replay_pipeline.py
"""

import filecmp
import hashlib
import json
import tempfile
from pathlib import Path

from finkg.gateway import LlmRequest, TransportReply
from finkg.pipeline import config_from_dict, run_pipeline

FILING = """# Orion Fabrication annual overview

Orion Fabrication supplies lithography components to chip makers. The
Precision Optics segment reported strong demand, and the company
discloses water usage targets in its sustainability report.

Orion partners with two glass vendors and faces single-source risk for
specialty coatings. Export control changes impacted deliveries to some
regions during the second half.

## Segment results

| Segment | Revenue | Growth |
| --- | --- | --- |
| Precision Optics | $4.1B | 38% |
| Metrology | $1.2B | 6% |
"""


class ScriptedModel:
    """Answers by request tag; replies are pure functions of the prompt."""

    def __call__(self, req: LlmRequest) -> TransportReply:
        tag = req.request_tag
        token = hashlib.sha256(req.user_prompt.encode("utf-8")).hexdigest()[:6]
        if tag.endswith(".extract"):
            rows = [
                ["Orion Fabrication", "ORG", "Impacted_By",
                 f"single-source risk {token}", "RISK_FACTOR"],
                ["Precision Optics", "SEGMENT", "Discloses",
                 "revenue growth", "FIN_METRIC"],
            ]
        elif tag.endswith(".normalize"):
            rows = [
                ["Orion Fabrication", "ORG", "Partners_With",
                 f"glass vendor {token}", "ORG"],
            ]
        elif tag.endswith(".feedback"):
            return TransportReply("[]")
        elif tag.endswith(".correct"):
            rows = [["Orion Fabrication", "ORG", "Produces",
                     f"coating {token}", "PRODUCT"]]
        elif tag in ("judge.vote", "judge.vote.recast"):
            return TransportReply(json.dumps(
                {"winner": "A", "explanation": f"scripted vote {token}"}
            ))
        else:
            raise AssertionError(f"unexpected request tag {tag!r}")
        return TransportReply(json.dumps(rows))


def config_for(root: Path, gateway_mode: str, out_dir: str) -> dict:
    return {
        "inputs": ["docs/orion.md"],
        "out_dir": out_dir,
        "modes": ["single_pass", "multi_pass", "reflection"],
        "chunk": {"max_tokens": 256},
        "gateway": {"mode": gateway_mode, "store": "store"},
        "judge": {"metrics": ["precision", "faithfulness"]},
    }


def artifact_files(run_dir: Path) -> dict[str, bytes]:
    # the manifest carries timestamps, so it stays out of the comparison
    return {
        str(p.relative_to(run_dir)): p.read_bytes()
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


with tempfile.TemporaryDirectory(prefix="finkg-demo-") as tmp:
    root = Path(tmp)
    (root / "docs").mkdir()
    (root / "docs" / "orion.md").write_text(FILING, encoding="utf-8")
    (root / "store").mkdir()

    print("Working under", root)
    print()

    print("1. Record: every model reply lands in the store.")
    config = config_from_dict(config_for(root, "record", "runs-record"), base_dir=root)
    manifest = run_pipeline(config, transport=ScriptedModel())
    for name, stage in manifest.stages.items():
        print(f"   {name}: {stage.status}")
    stored = len(list((root / "store").glob("*.json")))
    print("   store now holds", stored, "replies")
    print()

    print("2. Replay twice; no transport is even constructed.")
    replay_a = config_from_dict(config_for(root, "replay", "runs-a"), base_dir=root)
    replay_b = config_from_dict(config_for(root, "replay", "runs-b"), base_dir=root)
    run_a = run_pipeline(replay_a)
    run_b = run_pipeline(replay_b)
    assert run_a.ok() and run_b.ok()
    dir_a = root / "runs-a" / replay_a.run_id
    dir_b = root / "runs-b" / replay_b.run_id
    print("   both runs share id", replay_a.run_id)

    files_a = artifact_files(dir_a)
    files_b = artifact_files(dir_b)
    assert files_a.keys() == files_b.keys()
    assert all(files_a[k] == files_b[k] for k in files_a)
    print("  ", len(files_a), "artifacts, byte-identical across the two runs")
    print()

    print("3. Resume: drop report.md and run again; only the report rebuilds.")
    chunks_file = next((dir_a / "chunks").iterdir())
    before = chunks_file.stat().st_mtime_ns
    (dir_a / "report.md").unlink()
    run_pipeline(replay_a)
    assert (dir_a / "report.md").exists()
    assert chunks_file.stat().st_mtime_ns == before
    print("   chunk artifacts untouched, report regenerated")
    print()

    print("4. The report, minus its tables:")
    for line in (dir_a / "report.md").read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            print("  ", line)
