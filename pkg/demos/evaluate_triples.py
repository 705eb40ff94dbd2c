"""Walk through the intrinsic evaluation metrics on a handful of triples.

Everything here runs offline. We build a few triples by hand, the way an
extraction workflow would emit them, then score the batch with the rule
checker, the coverage ratios, and the entropy report.

Run it with:  python3 demos/evaluate_triples.py
"""

from finkg import Triple, TripleSet, load_schema
from finkg.evaluation import (
    aggregate_checkrules,
    checkrules_score,
    coverage_metrics,
    entropy_report,
    evaluate_rules,
)

schema = load_schema()

print("Schema:", len(schema.entity_types), "entity types,",
      len(schema.relation_types), "relations")
print()

def make(head, head_type, relation, tail, tail_type, chunk):
    return Triple(head, head_type, relation, tail, tail_type,
                  chunk_id=chunk, doc_id="demo", mode="single_pass")


# A clean triple: every rule passes.
good = make("NVDA", "ORG", "Impacted_By",
            "supply chain disruptions", "RISK_FACTOR", "demo:0000")

# The same fact as a sloppy extractor might phrase it. The head is an
# abstract self-reference, and "Hurt_By" is not in the relation schema.
sloppy = make("the Company", "ORG", "Hurt_By",
              "supply chain disruptions", "RISK_FACTOR", "demo:0000")

for label, t in (("clean", good), ("sloppy", sloppy)):
    failed = [r.rule for r in evaluate_rules(t, schema) if not r.passed]
    print(f"{label}: score {checkrules_score(t, schema):.2f}", end="")
    print(f", failed {failed}" if failed else ", all rules pass")
print()

# Score a batch. Pass rates are per rule, and the at-least-k curve says
# what percentage of triples pass at least k of the four rules.
batch = [
    good,
    sloppy,
    make("Data Center", "SEGMENT", "Discloses", "revenue growth",
         "FIN_METRIC", "demo:0001"),
    make("We", "ORG", "Produces", "graphics processing units for gamers",
         "PRODUCT", "demo:0001"),
]
report = aggregate_checkrules(batch, schema)
print("Mean rule score over", len(batch), "triples:",
      f"{report.to_dict()['mean_score']:.3f}")
for rule, rate in report.per_rule_pass_rate.items():
    print(f"  {rule}: {rate:.1f}%")
for k, pct in enumerate(report.at_least_k, start=1):
    print(f"  at least {k} rules: {pct:.1f}%")
print()

# Coverage works per chunk: how much of what the chunk mentions made it
# into the graph, and how much of the schema each chunk touches.
per_chunk = [
    TripleSet(triples=(good, sloppy), chunk_id="demo:0000", mode="single_pass"),
    TripleSet(triples=(batch[2], batch[3]), chunk_id="demo:0001",
              mode="single_pass"),
]
coverage = coverage_metrics(per_chunk, schema)
print("Coverage over", coverage.chunk_count, "chunks:")
for name in ("triples_per_chunk", "ecr", "tcr", "tcr_n", "rcr", "rcr_n"):
    print(f"  {name}: {getattr(coverage, name):.3f}")
print()

# Entropy looks at the whole batch: how evenly the graph spreads over
# entities, types, and relations. Higher is more diverse.
entropy = entropy_report(batch, schema)
print("Diversity (bits):")
for dist in ("entity", "entity_type", "relation"):
    print(f"  {dist}: shannon {entropy.shannon[dist]:.3f}, "
          f"collision {entropy.renyi2[dist]:.3f}")
print("Normalized against the schema:")
for dist in ("entity_type", "relation"):
    print(f"  {dist}: {entropy.normalized[dist]:.3f}")
