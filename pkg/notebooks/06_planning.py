# Planning the next measurement on the eight-variable scenario.

from trekunify import (
    implied_covariance,
    plan,
    population_marginals,
    second_trek_membership_test,
)
from trekunify.fixtures import scenario

s = scenario("planning")
table = s.table()  # six marginals {X, Y, v}
print(plan(table, budget=3).to_text(top=3))
print(plan(table, budget=2).to_text(top=2))

corr = implied_covariance(s.graph)
after = table.with_marginal(population_marginals(corr, [("B", "F", "C")], "n")[0])
print(plan(after, budget=3).to_text(top=1))

# E on the Y-side trek needs rho(E, F) as well
try:
    second_trek_membership_test(after, "E")
except KeyError as exc:
    print("not yet:", exc)
more = after.with_marginal(population_marginals(corr, [("E", "F")], "k")[0])
print(second_trek_membership_test(more, "E"))
