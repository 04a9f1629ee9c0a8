# Trek rule by hand and by matrix algebra.
# Run: python3 notebooks/01_trek_rule.py

import numpy as np

from trekunify import enumerate_treks, implied_covariance, trek_correlation, weighted
from trekunify.graph import max_trek_deviation, random_weighted_dag

# chain X -> A -> C plus a second parent of C
g = weighted("XAYC", {("X", "A"): 0.6, ("A", "C"): 0.5, ("Y", "C"): 0.4})
print(g.disturbance_var)  # disturbance variances that keep every variable at unit variance

for t in enumerate_treks(g, "X", "C"):
    print(t)  # only one trek: X -> A -> C

print(trek_correlation(g, "X", "C"))  # 0.6 * 0.5
print(implied_covariance(g)["X", "C"])  # same number from (I - B)^-1 Omega (I - B)^-T

# treks through a common cause
fork = weighted("ZUV", {("Z", "U"): 0.7, ("Z", "V"): -0.5, ("U", "V"): 0.2})
print([str(t) for t in enumerate_treks(fork, "U", "V")])
print(trek_correlation(fork, "U", "V"), implied_covariance(fork)["U", "V"])

# random graphs: the two routes never disagree beyond rounding
rng = np.random.default_rng(0)
print(max(max_trek_deviation(random_weighted_dag(rng, 8)) for _ in range(50)))
