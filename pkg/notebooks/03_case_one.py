# Case One: a collider between X and Y, with extra children A and C.
# Which unified graphs fit, and which survive the trek inequalities.

from trekunify import implied_covariance, population_marginals, prune_pipeline, refine_with_new_marginal, weighted
from trekunify.fixtures import scenario
from trekunify.unify import generating_class_alive

s = scenario("case_one")
report = prune_pipeline(s.population_marginals())
print(report.to_text())
print("true class alive:", generating_class_alive(report, s.graph.dag))

# the A - B and B - C correlations are what is missing
for e in report.deferred():
    print(e.rule, e.description, e.missing)

# a version where A sits strongly between X and B, so measuring {A, B} is informative
g = weighted("XYABC", {("X", "A"): 0.3, ("X", "B"): 0.2, ("A", "B"): 0.6, ("Y", "B"): 0.4, ("Y", "C"): 0.3})
corr = implied_covariance(g)
r = prune_pipeline(population_marginals(corr, s.sets))
print(len(r.alive), "alive before {A,B}")
cands, table = refine_with_new_marginal(r.candidates, r.table, population_marginals(corr, [("A", "B")], "n")[0])
print(sum(c.alive for c in cands), "alive after")
for c in cands:
    if c.alive:
        print(sorted(c.graph.edges))
