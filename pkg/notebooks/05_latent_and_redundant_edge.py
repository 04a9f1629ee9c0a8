# Diamond X2 <- X1 -> X3, X2 -> X4 <- X3, measured as {X1,X2,X4} and {X1,X3,X4}.

from trekunify import PartialGraph, latent_check, redundant_edge_check
from trekunify.fixtures import scenario

clean = latent_check(scenario("case_three").table())
print(clean.verdict, clean.residual, clean.solved_coefficients)

hidden = latent_check(scenario("case_three_latent").table())  # L -> X2, L -> X3 never measured
print(hidden.verdict, round(hidden.residual, 4))

# two directed triangles, e.g. from a non-Gaussian search on each marginal
left = PartialGraph(("X1", "X2", "X4"), {("X1", "X2"): None, ("X2", "X4"): None, ("X1", "X4"): None})
right = PartialGraph(("X1", "X3", "X4"), {("X1", "X3"): None, ("X3", "X4"): None, ("X1", "X4"): None})

for name in ("redundant_edge", "redundant_edge_direct"):
    v = redundant_edge_check(left, right, scenario(name).table())
    print(name, v.decision, round(v.residual, 4), {k: round(x, 3) for k, x in v.coefficients.items()})
