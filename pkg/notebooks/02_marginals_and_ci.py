# Simulating overlapping marginals and reading CI facts off them.

from trekunify import build_correlation_table, extract_ci, simulate_marginals
from trekunify.fixtures import scenario

s = scenario("case_one")
print(s.graph.coeff)
print(s.sets)  # X and Y are in every marginal, A, B, C each in one

ms = simulate_marginals(s.graph, s.sets, n=20_000, seed=1)  # uniform disturbances by default
for m in ms:
    print(m.id, sorted(m.variables), m.n)

cat = extract_ci(ms, alpha=0.01)
for st in cat:
    if st.independent:
        print(st, round(st.p_value, 3), st.source)

table = build_correlation_table(ms)
print(table.pairs())
print(table.is_known("A", "B"))  # never measured together
print(round(table.get("X", "Y"), 4), table.n("X", "Y"))  # pooled over the three marginals

# population mode: exact correlations, tolerance instead of a test
pop = extract_ci(s.population_marginals())
print(len(pop), sum(st.independent for st in pop))
