"""Intrinsic evaluation: rule compliance, coverage ratios, and entropies.

Everything here is a pure function over extracted triples, so the whole
module is deterministic and permutation-invariant in triple order (up to
the per-triple listing in rule reports, which preserves input order for
auditability).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .model import Schema, Triple, TripleSet, normalize_surface, word_count

RULE_SUBJECT_REFERENCE = "subject_reference"
RULE_ENTITY_LENGTH = "entity_length"
RULE_ENTITY_SCHEMA = "entity_schema"
RULE_RELATION_SCHEMA = "relation_schema"
ALL_RULES = (
    RULE_SUBJECT_REFERENCE,
    RULE_ENTITY_LENGTH,
    RULE_ENTITY_SCHEMA,
    RULE_RELATION_SCHEMA,
)

MAX_ENTITY_WORDS = 5

#: Abstract subject references that defeat entity linking. Superset of the
#: usual filing boilerplate pronouns; callers may pass their own lexicon.
DEFAULT_ABSTRACT_REFERENCES = frozenset(
    {
        "we",
        "our",
        "us",
        "it",
        "they",
        "their",
        "the company",
        "the firm",
        "the corporation",
        "the group",
        "the business",
        "the registrant",
    }
)


@dataclass(frozen=True)
class RuleResult:
    rule: str
    passed: bool
    detail: str = ""

    def __post_init__(self) -> None:
        if not self.passed and not self.detail:
            raise ValueError(f"failed rule {self.rule} must carry a detail message")


def check_subject_reference(
    t: Triple, lexicon: frozenset[str] = DEFAULT_ABSTRACT_REFERENCES
) -> RuleResult:
    """Fails when the head is an abstract reference instead of a named entity."""
    head = normalize_surface(t.head)
    if head in lexicon:
        return RuleResult(
            rule=RULE_SUBJECT_REFERENCE,
            passed=False,
            detail=f"head {t.head!r} is an abstract reference, not a resolvable entity",
        )
    return RuleResult(rule=RULE_SUBJECT_REFERENCE, passed=True)


def check_entity_length(t: Triple) -> RuleResult:
    """Both entity names must be at most 5 words."""
    offending = []
    if word_count(t.head) > MAX_ENTITY_WORDS:
        offending.append(f"head {t.head!r} has {word_count(t.head)} words")
    if word_count(t.tail) > MAX_ENTITY_WORDS:
        offending.append(f"tail {t.tail!r} has {word_count(t.tail)} words")
    if offending:
        return RuleResult(rule=RULE_ENTITY_LENGTH, passed=False, detail="; ".join(offending))
    return RuleResult(rule=RULE_ENTITY_LENGTH, passed=True)


def check_entity_schema(t: Triple, s: Schema) -> RuleResult:
    """Both entity type labels must belong to the schema."""
    offending = []
    if not s.has_entity_type(t.head_type):
        offending.append(f"head_type {t.head_type!r} is not a schema entity type")
    if not s.has_entity_type(t.tail_type):
        offending.append(f"tail_type {t.tail_type!r} is not a schema entity type")
    if offending:
        return RuleResult(rule=RULE_ENTITY_SCHEMA, passed=False, detail="; ".join(offending))
    return RuleResult(rule=RULE_ENTITY_SCHEMA, passed=True)


def check_relation_schema(t: Triple, s: Schema) -> RuleResult:
    """The relation label must belong to the schema."""
    if not s.has_relation(t.relation):
        return RuleResult(
            rule=RULE_RELATION_SCHEMA,
            passed=False,
            detail=f"relation {t.relation!r} is not a schema relation",
        )
    return RuleResult(rule=RULE_RELATION_SCHEMA, passed=True)


def evaluate_rules(
    t: Triple, s: Schema, lexicon: frozenset[str] = DEFAULT_ABSTRACT_REFERENCES
) -> tuple[RuleResult, ...]:
    """All four rule results in canonical order."""
    return (
        check_subject_reference(t, lexicon),
        check_entity_length(t),
        check_entity_schema(t, s),
        check_relation_schema(t, s),
    )


def checkrules_score(
    t: Triple, s: Schema, lexicon: frozenset[str] = DEFAULT_ABSTRACT_REFERENCES
) -> float:
    """Mean of the four rule indicators; always one of {0, .25, .5, .75, 1}."""
    results = evaluate_rules(t, s, lexicon)
    return sum(1 for r in results if r.passed) / len(results)


@dataclass(frozen=True)
class TripleRuleScore:
    triple: Triple
    results: tuple[RuleResult, ...]
    score: float


@dataclass(frozen=True)
class CheckRulesReport:
    """Per-triple scores plus rule-level and at-least-k pass percentages."""

    per_triple: tuple[TripleRuleScore, ...]
    per_rule_pass_rate: Mapping[str, float]
    at_least_k: tuple[float, float, float, float]
    empty: bool

    def to_dict(self) -> dict:
        return {
            "triple_count": len(self.per_triple),
            "empty": self.empty,
            "per_rule_pass_rate": dict(self.per_rule_pass_rate),
            "at_least_k": {f"at_least_{k}": v for k, v in zip((1, 2, 3, 4), self.at_least_k)},
            "mean_score": (
                sum(s.score for s in self.per_triple) / len(self.per_triple)
                if self.per_triple
                else 0.0
            ),
        }


def aggregate_checkrules(
    triples: Iterable[Triple],
    s: Schema,
    lexicon: frozenset[str] = DEFAULT_ABSTRACT_REFERENCES,
) -> CheckRulesReport:
    """Rule compliance aggregates; percentages are in [0, 100]."""
    scored: list[TripleRuleScore] = []
    for t in triples:
        results = evaluate_rules(t, s, lexicon)
        passed = sum(1 for r in results if r.passed)
        scored.append(TripleRuleScore(triple=t, results=results, score=passed / len(results)))

    if not scored:
        return CheckRulesReport(
            per_triple=(),
            per_rule_pass_rate={rule: 0.0 for rule in ALL_RULES},
            at_least_k=(0.0, 0.0, 0.0, 0.0),
            empty=True,
        )

    n = len(scored)
    per_rule = {
        rule: 100.0 * sum(1 for s_ in scored if s_.results[i].passed) / n
        for i, rule in enumerate(ALL_RULES)
    }
    pass_counts = [sum(1 for r in s_.results if r.passed) for s_ in scored]
    at_least = tuple(
        100.0 * sum(1 for c in pass_counts if c >= k) / n for k in (1, 2, 3, 4)
    )
    return CheckRulesReport(
        per_triple=tuple(scored), per_rule_pass_rate=per_rule, at_least_k=at_least, empty=False
    )


@dataclass(frozen=True)
class CoverageReport:
    """Unweighted chunk means of uniqueness ratios plus the triple count mean.

    Ratios use these per-chunk denominators: entity mentions (2 per triple)
    for ECR and TCR, triple count for RCR, and schema cardinalities for the
    -N variants. A chunk with zero triples contributes 0 everywhere.
    """

    triples_per_chunk: float
    ecr: float
    tcr: float
    tcr_n: float
    rcr: float
    rcr_n: float
    chunk_count: int
    degenerate_chunks: int

    def to_dict(self) -> dict:
        return {
            "triples_per_chunk": self.triples_per_chunk,
            "ecr": self.ecr,
            "tcr": self.tcr,
            "tcr_n": self.tcr_n,
            "rcr": self.rcr,
            "rcr_n": self.rcr_n,
            "chunk_count": self.chunk_count,
            "degenerate_chunks": self.degenerate_chunks,
        }


def coverage_metrics(per_chunk_sets: Sequence[TripleSet], s: Schema) -> CoverageReport:
    if not per_chunk_sets:
        raise ValueError("coverage requires at least one chunk")
    ecr_vals: list[float] = []
    tcr_vals: list[float] = []
    tcr_n_vals: list[float] = []
    rcr_vals: list[float] = []
    rcr_n_vals: list[float] = []
    counts: list[int] = []
    degenerate = 0
    for chunk_set in per_chunk_sets:
        n = len(chunk_set)
        counts.append(n)
        if n == 0:
            degenerate += 1
            for vals in (ecr_vals, tcr_vals, tcr_n_vals, rcr_vals, rcr_n_vals):
                vals.append(0.0)
            continue
        mentions = 2 * n
        entities = {normalize_surface(t.head) for t in chunk_set}
        entities |= {normalize_surface(t.tail) for t in chunk_set}
        types = {normalize_surface(t.head_type) for t in chunk_set}
        types |= {normalize_surface(t.tail_type) for t in chunk_set}
        relations = {normalize_surface(t.relation) for t in chunk_set}
        ecr_vals.append(len(entities) / mentions)
        tcr_vals.append(len(types) / mentions)
        tcr_n_vals.append(len(types) / s.entity_type_count)
        rcr_vals.append(len(relations) / n)
        rcr_n_vals.append(len(relations) / s.relation_type_count)

    def mean(vals: Sequence[float]) -> float:
        return math.fsum(vals) / len(vals)

    return CoverageReport(
        triples_per_chunk=mean(counts),
        ecr=mean(ecr_vals),
        tcr=mean(tcr_vals),
        tcr_n=mean(tcr_n_vals),
        rcr=mean(rcr_vals),
        rcr_n=mean(rcr_n_vals),
        chunk_count=len(per_chunk_sets),
        degenerate_chunks=degenerate,
    )


@dataclass(frozen=True)
class FrequencyDistribution:
    """Observed label counts; probabilities are counts over the total.

    Only observed labels enter, so every probability is strictly positive.
    """

    counts: Mapping[str, int]
    total: int

    def __post_init__(self) -> None:
        if not self.counts:
            raise ValueError("distribution has no observations")
        if any(c <= 0 for c in self.counts.values()):
            raise ValueError("all counts must be positive")
        if self.total != sum(self.counts.values()):
            raise ValueError("total does not match the sum of counts")

    @classmethod
    def from_observations(cls, labels: Iterable[str]) -> "FrequencyDistribution":
        counts: dict[str, int] = {}
        for label in labels:
            counts[label] = counts.get(label, 0) + 1
        return cls(counts=counts, total=sum(counts.values()))

    def probabilities(self) -> dict[str, float]:
        return {label: c / self.total for label, c in self.counts.items()}

    def support_size(self) -> int:
        return len(self.counts)


def frequency_distributions(
    all_triples: Sequence[Triple],
) -> tuple[FrequencyDistribution, FrequencyDistribution, FrequencyDistribution]:
    """Corpus-level (entity, entity-type, relation) label distributions.

    Entities pool head and tail canonical names; types pool head and tail
    type labels; relations come from the relation field alone.
    """
    if not all_triples:
        raise ValueError("no triples to build distributions from")
    entities: list[str] = []
    types: list[str] = []
    relations: list[str] = []
    for t in all_triples:
        entities.append(normalize_surface(t.head))
        entities.append(normalize_surface(t.tail))
        types.append(normalize_surface(t.head_type))
        types.append(normalize_surface(t.tail_type))
        relations.append(normalize_surface(t.relation))
    return (
        FrequencyDistribution.from_observations(entities),
        FrequencyDistribution.from_observations(types),
        FrequencyDistribution.from_observations(relations),
    )


def shannon_entropy(p: FrequencyDistribution) -> float:
    """H(X) = -sum p_i log2 p_i, in bits."""
    # + 0.0 keeps a point mass from reporting -0.0
    return -math.fsum(q * math.log2(q) for q in p.probabilities().values()) + 0.0


def normalized_entropy(p: FrequencyDistribution, schema_cardinality: int) -> float:
    """H(X) / log2 |S| against the schema's label count.

    Deliberately unclamped: observed labels outside the schema can push
    the ratio above 1, which is itself a diversity signal.
    """
    if schema_cardinality < 2:
        raise ValueError(f"schema cardinality must be >= 2, got {schema_cardinality}")
    return shannon_entropy(p) / math.log2(schema_cardinality)


def renyi_entropy2(p: FrequencyDistribution) -> float:
    """Collision entropy H_2(X) = -log2 sum p_i^2, in bits."""
    return -math.log2(math.fsum(q * q for q in p.probabilities().values())) + 0.0


def normalized_renyi2(p: FrequencyDistribution, schema_cardinality: int) -> float:
    if schema_cardinality < 2:
        raise ValueError(f"schema cardinality must be >= 2, got {schema_cardinality}")
    return renyi_entropy2(p) / math.log2(schema_cardinality)


@dataclass(frozen=True)
class EntropyReport:
    """Shannon and collision entropies of the three corpus distributions.

    Normalized variants exist only for the schema-bounded distributions
    (entity names have no schema cardinality to normalize against).
    """

    shannon: Mapping[str, float]
    normalized: Mapping[str, float]
    renyi2: Mapping[str, float]
    normalized_renyi2: Mapping[str, float]

    def to_dict(self) -> dict:
        return {
            "shannon": dict(self.shannon),
            "normalized": dict(self.normalized),
            "renyi2": dict(self.renyi2),
            "normalized_renyi2": dict(self.normalized_renyi2),
        }


def entropy_report(all_triples: Sequence[Triple], s: Schema) -> EntropyReport:
    p_e, p_t, p_r = frequency_distributions(all_triples)
    return EntropyReport(
        shannon={
            "entity": shannon_entropy(p_e),
            "entity_type": shannon_entropy(p_t),
            "relation": shannon_entropy(p_r),
        },
        normalized={
            "entity_type": normalized_entropy(p_t, s.entity_type_count),
            "relation": normalized_entropy(p_r, s.relation_type_count),
        },
        renyi2={
            "entity": renyi_entropy2(p_e),
            "entity_type": renyi_entropy2(p_t),
            "relation": renyi_entropy2(p_r),
        },
        normalized_renyi2={
            "entity_type": normalized_renyi2(p_t, s.entity_type_count),
            "relation": normalized_renyi2(p_r, s.relation_type_count),
        },
    )
