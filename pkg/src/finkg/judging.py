"""Three-way comparative judging of extraction outputs.

Each (chunk, metric) comparison casts three independent votes with
seed-derived candidate orderings; a strict majority decides, a fourth
vote breaks three-way splits, and anything still undecided is reported
as unresolved rather than guessed. The consensus computation sees mode
tags only, never the presentation letters, so relabeling candidates
cannot change a winner.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

from .events import EventLog
from .extraction import load_prompt, render_prompt, rows_json
from .gateway import (
    REPROMPT_SUFFIX,
    JsonPayloadError,
    LlmGateway,
    LlmRequest,
    Shape,
    TransportError,
    parse_json_payload,
)
from .model import Chunk, TripleSet

DEFAULT_JUDGE_MODEL = "Qwen3-32B"
DEFAULT_JUDGE_TEMPERATURE = 0.1

METRIC_PRECISION = "precision"
METRIC_FAITHFULNESS = "faithfulness"
METRIC_COMPREHENSIVENESS = "comprehensiveness"
METRIC_RELEVANCE = "relevance"
ALL_METRICS = (
    METRIC_PRECISION,
    METRIC_FAITHFULNESS,
    METRIC_COMPREHENSIVENESS,
    METRIC_RELEVANCE,
)

#: What each metric asks the judge to compare.
RUBRICS: Mapping[str, str] = {
    METRIC_PRECISION: (
        "Assesses the clarity, specificity, and uniqueness of the extracted triples."
    ),
    METRIC_FAITHFULNESS: (
        "Measures the factual accuracy and grounding of the triples within the source text."
    ),
    METRIC_COMPREHENSIVENESS: (
        "Evaluates how completely the generated triples capture the core informational "
        "content of the source text."
    ),
    METRIC_RELEVANCE: (
        "Determines the contextual alignment of triples with the main topics and themes "
        "of the source text."
    ),
}

TIE = "tie"
UNRESOLVED = "unresolved"
LETTERS = ("A", "B", "C")

VOTE_SHAPE = Shape(kind="object", required=("winner", "explanation"))


@dataclass(frozen=True)
class JudgeConfig:
    model: str = DEFAULT_JUDGE_MODEL
    temperature: float = DEFAULT_JUDGE_TEMPERATURE
    metrics: tuple[str, ...] = ALL_METRICS
    n_votes: int = 3
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        bad = [m for m in self.metrics if m not in RUBRICS]
        if bad:
            raise ValueError(f"unknown judge metrics {bad}")
        if self.n_votes != 3:
            raise ValueError("the voting protocol is defined for exactly 3 initial votes")


@dataclass(frozen=True)
class Vote:
    """One judge answer, already translated from letter to mode tag."""

    winner: str
    explanation: str
    presentation_order: tuple[str, ...]
    vote_index: int

    def __post_init__(self) -> None:
        if self.winner != TIE and self.winner not in self.presentation_order:
            raise ValueError(f"winner {self.winner!r} is not a presented mode")
        if not (1 <= self.vote_index <= 4):
            raise ValueError("vote_index must be in 1..4")

    def to_record(self) -> dict:
        return {
            "winner": self.winner,
            "explanation": self.explanation,
            "presentation_order": list(self.presentation_order),
            "vote_index": self.vote_index,
        }


@dataclass(frozen=True)
class JudgeOutcome:
    """Result of one (chunk, metric) comparison.

    ``failed`` marks outcomes cut short by a gateway failure; only those
    may carry fewer than three votes.
    """

    chunk_id: str
    metric: str
    votes: tuple[Vote, ...]
    consensus_winner: str
    unanimous: bool
    failed: bool = False

    def __post_init__(self) -> None:
        if self.failed:
            if self.consensus_winner != UNRESOLVED:
                raise ValueError("a failed outcome cannot name a winner")
            return
        if len(self.votes) not in (3, 4):
            raise ValueError("an outcome carries 3 votes, or 4 when a tiebreak was needed")
        needed_fourth = consensus_of([v.winner for v in self.votes[:3]]) is None
        if (len(self.votes) == 4) != needed_fourth:
            raise ValueError("a fourth vote must exist iff the first three had no majority")

    def to_record(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "metric": self.metric,
            "votes": [v.to_record() for v in self.votes],
            "consensus_winner": self.consensus_winner,
            "unanimous": self.unanimous,
            "failed": self.failed,
        }


def vote_seed(chunk_id: str, metric: str, vote_index: int) -> int:
    """Reproducible per-vote seed; independent across votes and metrics."""
    digest = hashlib.sha256(f"{chunk_id}|{metric}|{vote_index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def build_judge_prompt(
    chunk: Chunk,
    outputs: Sequence[TripleSet],
    metric: str,
    seed: int,
    template: str | None = None,
) -> tuple[str, tuple[str, ...]]:
    """Blinded comparison prompt plus the letter -> mode presentation order.

    presentation_order[i] is the mode shown under LETTERS[i].
    """
    if len(outputs) != 3:
        raise ValueError(f"expected exactly 3 candidate sets, got {len(outputs)}")
    modes = [s.mode for s in outputs]
    if len(set(modes)) != 3:
        raise ValueError(f"candidate sets must come from 3 distinct modes, got {modes}")
    if metric not in RUBRICS:
        raise ValueError(f"unknown metric {metric!r}")

    shuffled = list(outputs)
    random.Random(seed).shuffle(shuffled)
    order = tuple(s.mode for s in shuffled)

    if template is None:
        template = load_prompt("judge.vote")
    prompt = render_prompt(
        template,
        metric_name=metric,
        rubric=RUBRICS[metric],
        section=chunk.section or "unknown",
        chunk_text=chunk.text,
        candidate_a=rows_json(tuple(shuffled[0])),
        candidate_b=rows_json(tuple(shuffled[1])),
        candidate_c=rows_json(tuple(shuffled[2])),
    )
    return prompt, order


SYSTEM_JUDGE = (
    "You are an impartial judge comparing knowledge-graph extraction outputs. "
    "You commit to a winner first and output only strict JSON."
)


def cast_vote(
    prompt: str,
    presentation_order: tuple[str, ...],
    vote_index: int,
    gateway: LlmGateway,
    config: JudgeConfig,
    chunk_id: str = "",
    events: EventLog | None = None,
) -> Vote:
    """One judge call; an unparseable winner is recast once, then ties out."""

    def attempt(user_prompt: str, tag: str) -> Vote:
        request = LlmRequest(
            model=config.model,
            system_prompt=SYSTEM_JUDGE,
            user_prompt=user_prompt,
            temperature=config.temperature,
            max_output_tokens=config.max_output_tokens,
            request_tag=tag,
        )
        response = gateway.complete(request)
        value = parse_json_payload(response.text, VOTE_SHAPE)
        assert isinstance(value, dict)
        letter = str(value["winner"]).strip().upper()
        if letter not in LETTERS:
            raise JsonPayloadError(f"winner {letter!r} is not one of A/B/C")
        return Vote(
            winner=presentation_order[LETTERS.index(letter)],
            explanation=str(value.get("explanation", "")),
            presentation_order=presentation_order,
            vote_index=vote_index,
        )

    try:
        return attempt(prompt, "judge.vote")
    except JsonPayloadError as first:
        if events:
            events.emit(
                "vote_invalid",
                f"vote {vote_index}: {first}; recasting once",
                chunk_id=chunk_id,
                mode="judge",
                step=vote_index,
            )
    try:
        return attempt(prompt + REPROMPT_SUFFIX, "judge.vote.recast")
    except JsonPayloadError as second:
        if events:
            events.emit(
                "vote_invalid",
                f"vote {vote_index} recast failed: {second}; recording a tie",
                chunk_id=chunk_id,
                mode="judge",
                step=vote_index,
            )
        return Vote(
            winner=TIE,
            explanation=f"invalid judge response: {second}",
            presentation_order=presentation_order,
            vote_index=vote_index,
        )


def consensus_of(initial_winners: Sequence[str]) -> str | None:
    """Strict-majority winner of the first three votes, else None."""
    for candidate in set(initial_winners):
        if candidate != TIE and initial_winners.count(candidate) >= 2:
            return candidate
    return None


def run_comparison(
    chunk: Chunk,
    outputs: Sequence[TripleSet],
    metric: str,
    gateway: LlmGateway,
    config: JudgeConfig = JudgeConfig(),
    events: EventLog | None = None,
) -> JudgeOutcome:
    """Three votes, then a decisive fourth only when they yield no majority."""
    votes: list[Vote] = []
    try:
        for vote_index in (1, 2, 3):
            prompt, order = build_judge_prompt(
                chunk, outputs, metric, vote_seed(chunk.chunk_id, metric, vote_index)
            )
            votes.append(
                cast_vote(prompt, order, vote_index, gateway, config, chunk.chunk_id, events)
            )

        winners = [v.winner for v in votes]
        consensus = consensus_of(winners)
        unanimous = len(set(winners)) == 1 and winners[0] != TIE
        if consensus is None:
            prompt, order = build_judge_prompt(
                chunk, outputs, metric, vote_seed(chunk.chunk_id, metric, 4)
            )
            fourth = cast_vote(prompt, order, 4, gateway, config, chunk.chunk_id, events)
            votes.append(fourth)
            consensus = fourth.winner if fourth.winner != TIE else None
    except TransportError as exc:
        if events:
            events.emit(
                "judge_failed",
                f"{metric}: {exc}",
                chunk_id=chunk.chunk_id,
                mode="judge",
            )
        return JudgeOutcome(
            chunk_id=chunk.chunk_id,
            metric=metric,
            votes=tuple(votes),
            consensus_winner=UNRESOLVED,
            unanimous=False,
            failed=True,
        )

    return JudgeOutcome(
        chunk_id=chunk.chunk_id,
        metric=metric,
        votes=tuple(votes),
        consensus_winner=consensus if consensus is not None else UNRESOLVED,
        unanimous=unanimous,
    )


@dataclass(frozen=True)
class JudgeReport:
    """Win rates and agreement per metric, in percent.

    For each metric the three mode win rates plus the unresolved rate
    partition 100%.
    """

    win_rate: Mapping[str, Mapping[str, float]]
    unresolved_rate: Mapping[str, float]
    agreement: Mapping[str, float]
    outcome_count: Mapping[str, int]
    empty: bool

    def to_dict(self) -> dict:
        return {
            "win_rate": {m: dict(rates) for m, rates in self.win_rate.items()},
            "unresolved_rate": dict(self.unresolved_rate),
            "agreement": dict(self.agreement),
            "outcome_count": dict(self.outcome_count),
            "empty": self.empty,
        }


def aggregate_judge(outcomes: Sequence[JudgeOutcome]) -> JudgeReport:
    """Per-metric win rates over all outcomes and unanimity agreement."""
    if not outcomes:
        return JudgeReport(
            win_rate={}, unresolved_rate={}, agreement={}, outcome_count={}, empty=True
        )
    metrics = sorted({o.metric for o in outcomes})
    modes = sorted({v.winner for o in outcomes for v in o.votes if v.winner != TIE})
    win_rate: dict[str, dict[str, float]] = {}
    unresolved_rate: dict[str, float] = {}
    agreement: dict[str, float] = {}
    outcome_count: dict[str, int] = {}
    for metric in metrics:
        rows = [o for o in outcomes if o.metric == metric]
        total = len(rows)
        outcome_count[metric] = total
        win_rate[metric] = {
            mode: 100.0 * sum(1 for o in rows if o.consensus_winner == mode) / total
            for mode in modes
        }
        unresolved_rate[metric] = (
            100.0 * sum(1 for o in rows if o.consensus_winner == UNRESOLVED) / total
        )
        agreement[metric] = sum(1 for o in rows if o.unanimous) / total
    return JudgeReport(
        win_rate=win_rate,
        unresolved_rate=unresolved_rate,
        agreement=agreement,
        outcome_count=outcome_count,
        empty=False,
    )


def write_outcomes_jsonl(path, outcomes: Sequence[JudgeOutcome]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_record(), ensure_ascii=False))
            fh.write("\n")
