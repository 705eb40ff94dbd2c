"""Shared fixtures for end-to-end pipeline tests.

CannedLlm stands in for a real model: every reply is a pure function of
the request, so recording it once gives a replay store that reproduces a
whole run without a network.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from finkg.gateway import LlmRequest, TransportReply

ALPHA_MD = """# Alpha Corp annual overview

Alpha Corp designs accelerator chips for data centers. The company's
Compute segment reported record revenue growth driven by demand for
training clusters. Management credits long-term supply agreements.

Alpha Corp faces supply chain disruptions affecting advanced packaging
capacity. The company discloses climate transition risk in its
sustainability section and partners with foundry vendors on capacity.

## Segment results

| Segment | Revenue | Growth |
| --- | --- | --- |
| Compute | $18.4B | 102% |
| Graphics | $11.9B | 14% |

The Compute segment operates in North America and Asia. Regulatory
export controls impacted shipments to certain regions during the year.
"""

BETA_MD = """# Beta Industries 10-K extract

Beta Industries manufactures industrial robotics and holds a stake in
Gamma Automation. The firm produces assembly arms for automotive
plants and complies with machine-safety directives.

Rising component costs impacted operating margin. Beta Industries is
involved in a joint venture with Delta Logistics covering warehouse
automation across Europe.
"""


def write_fixture_docs(root: Path) -> list[Path]:
    docs_dir = root / "docs"
    docs_dir.mkdir(parents=True, exist_ok=True)
    alpha = docs_dir / "alpha.md"
    beta = docs_dir / "beta.md"
    alpha.write_text(ALPHA_MD, encoding="utf-8")
    beta.write_text(BETA_MD, encoding="utf-8")
    return [alpha, beta]


class CannedLlm:
    """Deterministic model stub keyed on request tag and prompt digest."""

    def __init__(self):
        self.calls = 0

    def __call__(self, req: LlmRequest) -> TransportReply:
        self.calls += 1
        tag = req.request_tag
        token = hashlib.sha256(req.user_prompt.encode("utf-8")).hexdigest()[:6]
        if tag.endswith(".extract"):
            rows = [
                ["NVDA", "ORG", "Impacted_By", f"supply risk {token}", "RISK_FACTOR"],
                [f"Segment {token}", "SEGMENT", "Discloses", "revenue growth", "FIN_METRIC"],
            ]
            return TransportReply(json.dumps(rows))
        if tag.endswith(".normalize"):
            rows = [
                ["NVDA", "ORG", "Impacted_By", f"normalized risk {token}", "RISK_FACTOR"],
            ]
            return TransportReply(json.dumps(rows))
        if tag.endswith(".feedback"):
            return TransportReply("[]")
        if tag.endswith(".correct"):
            rows = [["NVDA", "ORG", "Produces", f"chip {token}", "PRODUCT"]]
            return TransportReply(json.dumps(rows))
        if tag in ("judge.vote", "judge.vote.recast"):
            return TransportReply(json.dumps({"winner": "A", "explanation": f"canned {token}"}))
        if tag == "schema.proposal":
            draft = {
                "schema_id": "draft",
                "entity_types": [{"label": "ORG", "definition": "an organization"}],
                "relation_types": [{"label": "Produces", "definition": "makes a product"}],
            }
            return TransportReply(json.dumps(draft))
        raise AssertionError(f"unexpected request tag {tag!r}")


def base_config_dict(root: Path, gateway_mode: str, metrics=("precision",)) -> dict:
    """Config document matching write_fixture_docs output, paths relative."""
    return {
        "inputs": ["docs/alpha.md", "docs/beta.md"],
        "out_dir": "runs",
        "modes": ["single_pass", "multi_pass", "reflection"],
        "chunk": {"max_tokens": 256},
        "gateway": {"mode": gateway_mode, "store": "store", "max_in_flight": 2},
        "judge": {"metrics": list(metrics)},
    }


def record_fixture_store(root: Path, metrics=("precision",)) -> Path:
    """Run the full pipeline once in record mode; returns the store path."""
    from finkg.pipeline import config_from_dict, run_pipeline

    write_fixture_docs(root)
    store = root / "store"
    store.mkdir(parents=True, exist_ok=True)
    config = config_from_dict(base_config_dict(root, "record", metrics), base_dir=root)
    manifest = run_pipeline(config, transport=CannedLlm())
    if not manifest.ok():
        bad = {n: (s.status, s.error) for n, s in manifest.stages.items() if s.status != "done"}
        raise AssertionError(f"record run did not complete: {bad}")
    return store
