"""Shared fixture builders for the test suite."""

from __future__ import annotations

import json

from finkg.gateway import LlmRequest, TransportReply
from finkg.model import Chunk, LabelDef, Schema, Triple

ENTITY_LABELS = (
    "ORG",
    "PERSON",
    "COMP",
    "PRODUCT",
    "SEGMENT",
    "FIN_METRIC",
    "RISK_FACTOR",
    "EVENT",
    "REGULATORY_REQUIREMENT",
    "ESG_TOPIC",
)

RELATION_LABELS = (
    "Has_Stake_In",
    "Operates_In",
    "Produces",
    "Impacts",
    "Involved_In",
    "Impacted_By",
    "Discloses",
    "Complies_With",
    "Supplies",
    "Partners_With",
)


def build_default_schema() -> Schema:
    return Schema(
        entity_types=tuple(LabelDef(lbl, f"{lbl} definition") for lbl in ENTITY_LABELS),
        relation_types=tuple(LabelDef(lbl, f"{lbl} definition") for lbl in RELATION_LABELS),
    )


def make_triple(**overrides) -> Triple:
    base = dict(
        head="NVDA",
        head_type="ORG",
        relation="Impacted_By",
        tail="supply chain disruptions",
        tail_type="RISK_FACTOR",
        chunk_id="doc1:0003",
        doc_id="doc1",
        mode="single_pass",
        step=1,
    )
    base.update(overrides)
    return Triple(**base)


def make_chunk(text: str = "NVDA faced supply chain disruptions.", **overrides) -> Chunk:
    base = dict(
        chunk_id="doc1:0003",
        doc_id="doc1",
        kind="narrative",
        text=text,
        section="Risk Factors",
        token_estimate=max(1, len(text) // 4),
        char_span=(0, len(text)),
    )
    base.update(overrides)
    return Chunk(**base)


class ModeVoter:
    """Judge transport that votes for scripted modes, translated per vote.

    Works because votes within a comparison are cast sequentially, so the
    k-th request corresponds to vote_index k.
    """

    def __init__(self, chunk, outputs, metric, winners):
        from finkg.judging import LETTERS, build_judge_prompt, vote_seed

        self._letters = LETTERS
        self._build = build_judge_prompt
        self._seed = vote_seed
        self.chunk = chunk
        self.outputs = outputs
        self.metric = metric
        self.winners = list(winners)
        self.calls = 0

    def __call__(self, req):
        vote_index = self.calls + 1
        _, order = self._build(
            self.chunk,
            self.outputs,
            self.metric,
            self._seed(self.chunk.chunk_id, self.metric, vote_index),
        )
        winner_mode = self.winners[self.calls]
        self.calls += 1
        letter = self._letters[order.index(winner_mode)]
        return TransportReply(json.dumps({"winner": letter, "explanation": "scripted"}))


def judge_candidate_sets(chunk):
    """One non-empty TripleSet per extraction mode, sized 1, 2, 3."""
    from finkg.model import ALL_MODES, TripleSet

    sets = []
    for i, mode in enumerate(ALL_MODES):
        triples = tuple(
            make_triple(head=f"{mode}-{j}", chunk_id=chunk.chunk_id, mode=mode)
            for j in range(i + 1)
        )
        sets.append(TripleSet(triples=triples, chunk_id=chunk.chunk_id, mode=mode))
    return sets


class ScriptedTransport:
    """Transport stub: per-tag response queues, consumed in call order."""

    def __init__(self, script: dict[str, list[str]]):
        self.script = {tag: list(queue) for tag, queue in script.items()}
        self.requests: list[LlmRequest] = []

    def __call__(self, req: LlmRequest) -> TransportReply:
        self.requests.append(req)
        queue = self.script.get(req.request_tag)
        if not queue:
            raise AssertionError(f"no scripted response left for tag {req.request_tag!r}")
        return TransportReply(queue.pop(0))

    def tags_seen(self) -> list[str]:
        return [r.request_tag for r in self.requests]
