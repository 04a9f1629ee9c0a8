# Case Two: X and Y linked by a chain through A and C and by a collider at B.

from trekunify import build_correlation_table, chain_order, implied_covariance, population_marginals, prune_pipeline, weighted
from trekunify.fixtures import scenario

s = scenario("case_two")
r = prune_pipeline(s.population_marginals())
print(len(r.candidates), "classes,", len(r.alive), "alive")
for c in r.alive:
    print(sorted(c.graph.edges))

# which of A, C is closer to X on the chain?  needs rho(A, C), so measure {X, A, C}
t = s.table().with_marginal(population_marginals(implied_covariance(s.graph), [("X", "A", "C")], "n")[0])
print(chain_order(t, "X", "A", "C"))  # X->A->C: a_between, |rho_XC| = |rho_AC||rho_XA|

# A and C on separate branches from X: neither factorization holds
fork = implied_covariance(weighted("XAC", {("X", "A"): 0.6, ("X", "C"): 0.5}))
print(chain_order(build_correlation_table(population_marginals(fork, ["XAC"])), "X", "A", "C"))
