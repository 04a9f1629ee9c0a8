"""Acceptance criteria, one test and one printed PASS/FAIL line each.

Run ``pytest tests/test_acceptance.py`` (the lines appear in the terminal
summary) or ``python3 tests/test_acceptance.py``.
"""

import itertools
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import oracle_correlation  # noqa: E402
from trekunify.errors import StandardizationInfeasible, TrekUnifyError, UnknownPair  # noqa: E402
from trekunify.fixtures import scenario  # noqa: E402
from trekunify.graph import (  # noqa: E402
    Dag,
    calibrate_standardized,
    implied_covariance,
    max_trek_deviation,
    random_weighted_dag,
    weighted,
)
from trekunify.marginals import extract_ci, population_marginals  # noqa: E402
from trekunify.planner import (  # noqa: E402
    TrekHypothesis,
    chain_membership_test,
    hypothesize_treks,
    propose_measurements,
    second_trek_membership_test,
    two_trek_decomposition_test,
)
from trekunify.unify import (  # noqa: E402
    PartialGraph,
    enumerate_candidates,
    generating_class_alive,
    latent_check,
    prune_pipeline,
    redundant_edge_check,
    refine_with_new_marginal,
)

RESULTS: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_trek_rule_identity():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, oracle_worst = 0.0, 0.0
    for _ in range(200):
        w = random_weighted_dag(rng, int(rng.integers(2, 9)), p=0.4, bound=0.8)
        worst = max(worst, max_trek_deviation(w))
        # cross-check the package's covariance against the test oracle
        ref = oracle_correlation(list(w.nodes), w.coeff)
        oracle_worst = max(oracle_worst, float(np.abs(implied_covariance(w).values - ref).max()))
    elapsed = time.perf_counter() - start
    report(
        "trek-rule identity",
        worst <= 1e-9 and oracle_worst <= 1e-9 and elapsed < 10,
        f"200 graphs, max deviation {worst:.2e} (oracle {oracle_worst:.2e}), {elapsed:.2f}s",
    )


def test_case_one_enumeration():
    cands = enumerate_candidates("ABCXY", extract_ci(scenario("case_one").population_marginals()))
    report("case one enumeration", len(cands) == 5, f"{len(cands)} equivalence classes, expected 5")


def test_case_one_pruning():
    s = scenario("case_one")
    r = prune_pipeline(s.population_marginals())
    truth = generating_class_alive(r, s.graph.dag)
    # refinement on a variant where |rho_AB| > |rho_XB| (A mediates X -> B strongly)
    tri = weighted("XYABC", {("X", "A"): 0.3, ("X", "B"): 0.2, ("A", "B"): 0.6, ("Y", "B"): 0.4, ("Y", "C"): 0.3})
    corr = implied_covariance(tri)
    sets = s.sets
    rt = prune_pipeline(population_marginals(corr, sets))
    refined, _ = refine_with_new_marginal(rt.candidates, rt.table, population_marginals(corr, [("A", "B")], "n")[0])
    n_after = sum(c.alive for c in refined)
    reduced = n_after < len(rt.alive)
    report(
        "case one pruning",
        len(r.alive) <= 2 and truth is True and reduced,
        f"{len(r.alive)} of {len(r.candidates)} classes survive (need <= 2), true class alive={truth}; "
        f"{{A,B}} refinement {len(rt.alive)} -> {n_after}",
    )


def test_case_two():
    s = scenario("case_two")
    r = prune_pipeline(s.population_marginals())
    truth = generating_class_alive(r, s.graph.dag)
    report(
        "case two",
        len(r.alive) == 3 and truth is True,
        f"{len(r.alive)} of {len(r.candidates)} classes survive (expected 3), true class alive={truth}",
    )


def test_case_three():
    clean = latent_check(scenario("case_three").table())
    latent = latent_check(scenario("case_three_latent").table())
    a24, a34 = clean.solved_coefficients["a_X2X4"], clean.solved_coefficients["a_X3X4"]
    ok = (
        clean.residual <= 1e-9
        and abs(a24 - 0.3) <= 1e-9
        and abs(a34 - 0.2) <= 1e-9
        and latent.residual >= 0.01
        and latent.verdict == "extra_connection"
    )
    report(
        "case three latent check",
        ok,
        f"residual {clean.residual:.1e} with a24={a24:.12g}, a34={a34:.12g}; latent residual {latent.residual:.4f}",
    )


def test_redundant_edge():
    left = PartialGraph(("X1", "X2", "X4"), {("X1", "X2"): None, ("X2", "X4"): None, ("X1", "X4"): None})
    right = PartialGraph(("X1", "X3", "X4"), {("X1", "X3"): None, ("X3", "X4"): None, ("X1", "X4"): None})
    no = redundant_edge_check(left, right, scenario("redundant_edge").table(), tol=1e-9)
    yes = redundant_edge_check(left, right, scenario("redundant_edge_direct").table(), tol=1e-9)
    report(
        "redundant edge",
        no.decision == "remove" and yes.decision == "keep",
        f"without edge: {no.decision} (residual {no.residual:.1e}); with 0.25 edge: {yes.decision} (residual {yes.residual:.4f})",
    )


def test_planner():
    s = scenario("planning")
    table = s.table()
    top = propose_measurements(hypothesize_treks(table), table, 3)[0]
    corr = implied_covariance(s.graph)
    after = table.with_marginal(population_marginals(corr, [("B", "F", "C")], "n")[0])
    chain = chain_membership_test(after, TrekHypothesis(("X", "F"), ("A", "C")))
    two = two_trek_decomposition_test(after, "B", "F")
    try:
        second = second_trek_membership_test(after, "E")
        second_text = f"second-trek(E) {'pass' if second.passed else 'fail'} {second.max_residual:.1e}"
        second_ok = second.passed and second.max_residual <= 1e-9
    except UnknownPair as exc:
        second_ok = False
        second_text = f"second-trek(E) not evaluable: {exc}"
    ok = {"C", "F"} <= set(top.variables) and chain.passed and two.passed and second_ok
    ok = ok and max(chain.max_residual, two.max_residual) <= 1e-9
    report(
        "planner",
        ok,
        f"top proposal {{{','.join(top.variables)}}}; chain {chain.max_residual:.1e}, two-trek {two.max_residual:.1e}; {second_text}",
    )


def test_planner_second_trek_with_ef():
    """Informational: the second-trek test once rho(E,F) is also measured."""
    s = scenario("planning")
    corr = implied_covariance(s.graph)
    t = s.table()
    for i, extra in enumerate([("B", "F", "C"), ("E", "F")]):
        t = t.with_marginal(population_marginals(corr, [extra], f"n{i}")[0])
    r = second_trek_membership_test(t, "E")
    line = f"[INFO] planner second-trek(E) after {{B,F,C}} and {{E,F}}: {'pass' if r.passed else 'fail'}, residual {r.max_residual:.1e}"
    RESULTS.append(line)
    print(line)
    assert r.passed


def test_statistical_robustness():
    s = scenario("case_one")
    start = time.perf_counter()
    pop = prune_pipeline(s.population_marginals())
    ref = ({c.key for c in pop.candidates}, {c.key for c in pop.alive})
    matches, misses = 0, []
    for seed in range(100):
        try:
            r = prune_pipeline(s.sample_marginals(100_000, seed=seed))
        except TrekUnifyError as exc:
            misses.append(f"{seed}:{type(exc).__name__}")
            continue
        if ({c.key for c in r.candidates}, {c.key for c in r.alive}) == ref:
            matches += 1
        else:
            misses.append(f"{seed}:{len(r.candidates)}/{len(r.alive)}")
    elapsed = time.perf_counter() - start
    report(
        "statistical robustness",
        matches >= 95 and elapsed < 120,
        f"{matches}/100 seeds match population decisions in {elapsed:.1f}s; mismatches {', '.join(misses) or 'none'}",
    )


TOPOLOGIES = [
    ("XYABC", [("X", "A"), ("X", "B"), ("Y", "B"), ("Y", "C")], [("X", "Y", "A"), ("X", "Y", "B"), ("X", "Y", "C")]),
    ("XYABC", [("X", "A"), ("A", "C"), ("C", "Y"), ("X", "B"), ("Y", "B")], [("X", "Y", "A"), ("X", "Y", "B"), ("X", "Y", "C")]),
    (("X1", "X2", "X3", "X4"), [("X1", "X2"), ("X1", "X3"), ("X2", "X4"), ("X3", "X4")], [("X1", "X2", "X4"), ("X1", "X3", "X4")]),
]


def test_soundness():
    rng = np.random.default_rng(7)
    models = eliminated = absent = 0
    for topo in itertools.cycle(TOPOLOGIES):
        if models == 100:
            break
        nodes, edges, sets = topo
        coeff = {e: float(rng.choice([-1, 1]) * rng.uniform(0.2, 0.8)) for e in edges}
        try:
            w = calibrate_standardized(Dag(nodes, edges), coeff)
        except StandardizationInfeasible:
            continue
        models += 1
        alive = generating_class_alive(prune_pipeline(population_marginals(implied_covariance(w), sets)), w.dag)
        eliminated += alive is False
        absent += alive is None
    report(
        "soundness",
        eliminated == 0,
        f"{models} models, generating class eliminated {eliminated} times (not enumerated: {absent})",
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
