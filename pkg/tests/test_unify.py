import itertools
import json
import random

import networkx as nx
import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from conftest import brute_dags
from trekunify.cli import parse_partial_graph
from trekunify.errors import StandardizationInfeasible, TooManyVariables, UndirectedEdge, ZeroCorrelation
from trekunify.fixtures import scenario
from trekunify.graph import (
    CorrelationMatrix,
    Dag,
    calibrate_standardized,
    class_key,
    implied_covariance,
    weighted,
)
from trekunify.marginals import (
    PartialCorrelationTable,
    build_correlation_table,
    extract_ci,
    pair,
    population_marginals,
)
from trekunify.semsim import CiStatement
from trekunify.unify import (
    R3,
    R5,
    R6,
    Candidate,
    PartialGraph,
    PruneOptions,
    chain_order,
    enumerate_candidates,
    generating_class_alive,
    latent_check,
    mediation_inequality_prune,
    prune_pipeline,
    redundant_edge_check,
    refine_with_new_marginal,
)

SETS = [("X", "Y", "A"), ("X", "Y", "B"), ("X", "Y", "C")]


def skeleton_colliders(nodes, edges):
    g = nx.DiGraph(list(edges))
    g.add_nodes_from(nodes)
    skel = frozenset(frozenset(e) for e in g.edges)
    coll = frozenset(
        (frozenset((a, b)), c)
        for c in g
        for a, b in itertools.combinations(g.predecessors(c), 2)
        if not g.has_edge(a, b) and not g.has_edge(b, a)
    )
    return skel, coll


def oracle_classes(nodes, catalog):
    """Skeleton/collider keys of every DAG reproducing the catalog, by brute force over networkx."""
    stmts = sorted(((s.x, s.y, tuple(sorted(s.given)), s.independent) for s in catalog), key=lambda s: not s[3])
    out = set()
    for edges in brute_dags(nodes):
        g = nx.DiGraph(edges)
        g.add_nodes_from(nodes)
        if all(nx.is_d_separator(g, {x}, {y}, set(z)) == ind for x, y, z, ind in stmts):
            out.add(skeleton_colliders(nodes, edges))
    return out


def table_from(corr: CorrelationMatrix, sets=None, n=float("inf")):
    sets = sets or [corr.variables]
    ms = population_marginals(corr, sets)
    if n != float("inf"):
        from trekunify.marginals import MarginalDataset

        ms = [MarginalDataset.from_corr(m.id, m.corr, n) for m in ms]
    return build_correlation_table(ms)


class TestEnumeration:
    @pytest.mark.parametrize("name", ["case_one", "case_two"])
    def test_matches_brute_force(self, name):
        cat = extract_ci(scenario(name).population_marginals())
        cands = enumerate_candidates("ABCXY", cat)
        ours = {skeleton_colliders(c.graph.nodes, c.graph.edges) for c in cands}
        assert len(ours) == len(cands)
        assert ours == oracle_classes("ABCXY", cat)

    def test_counts(self):
        one = enumerate_candidates("ABCXY", extract_ci(scenario("case_one").population_marginals()))
        two = enumerate_candidates("ABCXY", extract_ci(scenario("case_two").population_marginals()))
        assert (len(one), len(two)) == (9, 26)

    def test_members_share_class(self):
        for c in enumerate_candidates("ABCXY", extract_ci(scenario("case_one").population_marginals())):
            assert c.graph in c.members
            assert {class_key(m) for m in c.members} == {class_key(c.graph)}

    def test_contradiction_is_empty(self):
        cat = [CiStatement("X", "Y", (), True, 0.5), CiStatement("X", "Y", (), False, 0.0)]
        assert enumerate_candidates("XY", cat) == []

    def test_too_many_variables(self):
        with pytest.raises(TooManyVariables):
            enumerate_candidates("ABCDEFGH", [])

    def test_statement_outside_union(self):
        with pytest.raises(ValueError):
            enumerate_candidates("XY", [CiStatement("X", "Z", (), True, 0.5)])

    def test_forbidden_edges(self):
        cat = extract_ci(scenario("case_one").population_marginals())
        cands = enumerate_candidates("ABCXY", cat, [("A", "B")])
        assert cands and all(not c.graph.adjacent("A", "B") for c in cands)
        assert len(cands) < 9

    def test_without_faithfulness_is_superset(self):
        cat = extract_ci(scenario("case_one").population_marginals())
        strict = {c.key for c in enumerate_candidates("ABCXY", cat)}
        loose = {class_key(c.graph) for c in enumerate_candidates("ABCXY", cat, faithfulness=False)}
        assert {class_key(c.graph) for c in enumerate_candidates("ABCXY", cat)} <= loose
        assert len(loose) > len(strict)

    def test_order_invariance(self):
        ms = scenario("case_two").population_marginals()
        base = [c.key for c in enumerate_candidates("ABCXY", extract_ci(ms))]
        stmts = list(extract_ci(ms[::-1]))
        random.Random(0).shuffle(stmts)
        assert [c.key for c in enumerate_candidates("YXCBA", stmts)] == base

    def test_parallel_workers_agree(self):
        cat = list(extract_ci(scenario("case_one").population_marginals()))
        # reversed order defeats the cache so the pool really runs
        a = [c.key for c in enumerate_candidates("ABCXY", cat, workers=1)]
        b = [c.key for c in enumerate_candidates("ABCXY", cat[::-1], workers=2)]
        assert a == b


class TestPruning:
    @pytest.fixture(scope="class")
    @staticmethod
    def case_one():
        return prune_pipeline(scenario("case_one").population_marginals())

    def test_case_one_r3(self, case_one):
        truth = class_key(scenario("case_one").graph.dag)
        alive = {class_key(c.graph) for c in case_one.alive}
        assert truth in alive
        assert len(case_one.alive) == 4
        for c in case_one.ruled_out:
            assert all(e.rule == R3 for e in c.ledger if e.violated)
        # a class placing A between X and B contradicts |rho_XA| < |rho_XB|
        for c in case_one.candidates:
            if ("A", "X") in c.graph.edges and ("A", "B") in c.graph.edges and not ("X", "B") in c.graph.edges:
                assert not c.alive

    def test_ledger_completeness(self, case_one):
        violated = [c for c in case_one.candidates if any(e.violated for e in c.ledger)]
        assert len(violated) == len(case_one.ruled_out)

    def test_deferred_name_missing_pairs(self, case_one):
        d = case_one.deferred()
        assert d
        assert {p for e in d for p in e.missing} == {("A", "B"), ("B", "C")}

    def test_case_two(self):
        r = prune_pipeline(scenario("case_two").population_marginals())
        assert generating_class_alive(r, scenario("case_two").graph.dag) is True
        assert len(r.alive) == 4
        for c in r.alive:
            assert ("X", "B") in c.graph.edges and ("Y", "B") in c.graph.edges

    def test_ruled_out_never_returns(self, case_one):
        again = mediation_inequality_prune(case_one.candidates, case_one.table, tol=0.9)
        assert [c.status for c in again] == [c.status for c in case_one.candidates]

    def test_ledger_append_only(self):
        c = Candidate(Dag("XY", []))
        from trekunify.unify import LedgerEntry

        e1 = LedgerEntry(R3, "a", "d", "deferred", {}, (("X", "Y"),))
        e2 = LedgerEntry(R3, "a", "d", "satisfied")
        c1 = c.append([e1])
        c2 = c1.append([e2])
        assert c2.ledger[: len(c1.ledger)] == c1.ledger
        assert c1.deferred() and not c2.deferred()
        c3 = c2.append([LedgerEntry(R3, "b", "d", "violated")])
        assert c3.status == "ruled_out"
        assert c3.append([LedgerEntry(R3, "c", "d", "satisfied")]).status == "ruled_out"

    def test_empty_marginals(self):
        with pytest.raises(ValueError):
            prune_pipeline([])

    def test_options_validated(self):
        with pytest.raises(ValueError):
            PruneOptions(alpha=0)
        with pytest.raises(ValueError):
            PruneOptions(tol=-1)

    def test_report_json_round_trip(self, case_one):
        doc = json.loads(case_one.to_json())
        assert doc["n_classes"] == 9 and doc["n_alive"] == 4
        assert {e["rule"] for c in doc["candidates"] for e in c["ledger"] if e["outcome"] == "violated"} == {R3}
        assert all("missing" in e for e in doc["deferred"])
        assert case_one.to_json() == prune_pipeline(scenario("case_one").population_marginals()).to_json()
        assert "4 alive" in case_one.to_text()


# X-side variant of Case One in which A sits between X and B strongly enough that
# |rho_AB| exceeds |rho_XB|
TRIANGLE = weighted(
    "XYABC", {("X", "A"): 0.3, ("X", "B"): 0.2, ("A", "B"): 0.6, ("Y", "B"): 0.4, ("Y", "C"): 0.3}
)


class TestRefinement:
    def test_no_new_pairs(self):
        corr = implied_covariance(scenario("case_one").graph)
        r = prune_pipeline(population_marginals(corr, SETS))
        extra = population_marginals(corr, [("X", "A")], prefix="n")[0]
        cands, table = refine_with_new_marginal(r.candidates, r.table, extra)
        assert list(cands) == list(r.candidates) and table is r.table

    def test_ab_rules_out_more(self):
        corr = implied_covariance(TRIANGLE)
        assert abs(corr["A", "B"]) > abs(corr["X", "B"])
        r = prune_pipeline(population_marginals(corr, SETS))
        before = {c.key for c in r.alive}
        ab = population_marginals(corr, [("A", "B")], prefix="n")[0]
        cands, table = refine_with_new_marginal(r.candidates, r.table, ab)
        after = {c.key for c in cands if c.alive}
        assert after < before
        assert generating_class_alive(r, TRIANGLE.dag) is not False
        # no class without an A - B adjacency survives
        assert all(c.graph.adjacent("A", "B") for c in cands if c.alive)
        assert table.is_known("A", "B")

    def test_monotone(self):
        corr = implied_covariance(TRIANGLE)
        r = prune_pipeline(population_marginals(corr, SETS))
        cands, _ = refine_with_new_marginal(r.candidates, r.table, population_marginals(corr, [("A", "B")], "n")[0])
        for old, new in zip(r.candidates, cands):
            assert old.key == new.key
            assert old.alive or not new.alive
            assert new.ledger[: len(old.ledger)] == old.ledger

    def test_resolving_everything(self):
        corr = implied_covariance(scenario("case_one").graph)
        r = prune_pipeline(population_marginals(corr, SETS))
        cands, table = r.candidates, r.table
        for i, s in enumerate([("A", "B"), ("B", "C")]):
            cands, table = refine_with_new_marginal(cands, table, population_marginals(corr, [s], f"n{i}")[0])
        assert all(not c.deferred() for c in cands if c.alive)
        truth = class_key(scenario("case_one").graph.dag)
        assert any(c.alive and class_key(c.graph) == truth for c in cands)


class TestChainOrder:
    CHAIN = implied_covariance(weighted("XAC", {("X", "A"): 0.6, ("A", "C"): 0.5}))

    def test_a_between(self):
        t = table_from(self.CHAIN)
        assert (t.get("X", "A"), t.get("X", "C"), t.get("A", "C")) == pytest.approx((0.6, 0.3, 0.5))
        assert chain_order(t, "X", "A", "C").verdict == "a_between"

    def test_swapped(self):
        assert chain_order(table_from(self.CHAIN), "X", "C", "A").verdict == "c_between"

    def test_two_treks(self):
        # A and C hang off X on separate branches
        corr = implied_covariance(weighted("XAC", {("X", "A"): 0.6, ("X", "C"): 0.5}))
        v = chain_order(table_from(corr), "X", "A", "C")
        assert v.verdict == "neither"
        assert abs(v.residual_a_between) > 1e-3 and abs(v.residual_c_between) > 1e-3

    def test_zero(self):
        corr = implied_covariance(weighted("XAC", {("X", "A"): 0.6}))
        with pytest.raises(ZeroCorrelation):
            chain_order(table_from(corr), "X", "A", "C")

    def test_sign_mismatch_noted(self):
        corr = CorrelationMatrix("XAC", [[1, 0.6, -0.3], [0.6, 1, 0.5], [-0.3, 0.5, 1]])
        v = chain_order(table_from(corr), "X", "A", "C")
        assert v.verdict == "neither" and "sign" in v.note

    def test_sample_tie(self):
        corr = CorrelationMatrix("XAC", [[1, 0.5, 0.5], [0.5, 1, 0.99], [0.5, 0.99, 1]])
        v = chain_order(table_from(corr, n=200), "X", "A", "C")
        assert v.verdict == "neither" and "both" in v.note


class TestLatentCheck:
    def test_no_latent(self):
        v = latent_check(scenario("case_three").table())
        assert v.verdict == "no_extra_connection"
        assert v.residual <= 1e-9
        assert v.solved_coefficients["a_X2X4"] == pytest.approx(0.3, abs=1e-9)
        assert v.solved_coefficients["a_X3X4"] == pytest.approx(0.2, abs=1e-9)

    def test_reference_correlations(self):
        t = scenario("case_three").table()
        assert [t.get(*p) for p in [("X2", "X4"), ("X3", "X4"), ("X1", "X4")]] == pytest.approx([0.34, 0.26, 0.23])

    def test_latent(self):
        v = latent_check(scenario("case_three_latent").table())
        assert v.verdict == "extra_connection" and v.residual >= 0.01

    def test_solved_equations_hold(self):
        t = scenario("case_three_latent").table()
        v = latent_check(t)
        k = t.get("X1", "X2") * t.get("X1", "X3")
        a24, a34 = v.solved_coefficients["a_X2X4"], v.solved_coefficients["a_X3X4"]
        assert abs(a24 + k * a34 - t.get("X2", "X4")) < 1e-12
        assert abs(k * a24 + a34 - t.get("X3", "X4")) < 1e-12

    def test_degenerate(self):
        known = {pair(*p): (r, float("inf")) for p, r in [
            (("X1", "X2"), 1.0), (("X1", "X3"), 1.0), (("X2", "X4"), 0.3),
            (("X3", "X4"), 0.3), (("X1", "X4"), 0.3),
        ]}
        v = latent_check(PartialCorrelationTable(known, frozenset({"X1", "X2", "X3", "X4"})))
        assert v.verdict == "degenerate" and not v.solved_coefficients

    def test_prune_stage(self):
        s = scenario("case_three_latent")
        r = prune_pipeline(s.population_marginals(), PruneOptions(latent=("X1", "X2", "X3", "X4")))
        assert r.latent.verdict == "extra_connection"
        hit = [c for c in r.candidates if any(e.rule == R5 for e in c.ledger)]
        assert hit and all(not c.alive for c in hit)
        clean = prune_pipeline(scenario("case_three").population_marginals(), PruneOptions(latent=("X1", "X2", "X3", "X4")))
        assert not any(e.rule == R5 for c in clean.candidates for e in c.ledger)


class TestRedundantEdge:
    def triangles(self):
        s = scenario("redundant_edge")
        return [parse_partial_graph(s.triangle_path(side).read_text()) for side in ("left", "right")]

    def test_remove(self):
        v = redundant_edge_check(*self.triangles(), scenario("redundant_edge").table())
        assert v.decision == "remove" and v.residual <= 1e-9
        assert v.edge == ("X1", "X4")

    def test_keep(self):
        v = redundant_edge_check(*self.triangles(), scenario("redundant_edge_direct").table())
        assert v.decision == "keep"
        assert v.residual == pytest.approx(0.25, abs=1e-9)
        assert v.coefficients["a_X1X2"] == pytest.approx(0.5)
        assert v.coefficients["a_X3X4"] == pytest.approx(0.2)

    def test_boundary_is_inclusive(self):
        t = scenario("redundant_edge_direct").table()
        left = PartialGraph(("X1", "X2", "X4"), {("X1", "X2"): 0.5, ("X2", "X4"): 0.3, ("X1", "X4"): None})
        right = PartialGraph(("X1", "X3", "X4"), {("X1", "X3"): 0.4, ("X3", "X4"): 0.2, ("X1", "X4"): None})
        gap = abs(t.get("X1", "X4") - (0.5 * 0.3 + 0.4 * 0.2))
        assert redundant_edge_check(left, right, t, tol=gap).decision == "remove"
        assert redundant_edge_check(left, right, t, tol=gap * (1 - 1e-12)).decision == "keep"

    def test_undirected(self):
        left, right = self.triangles()
        bad = PartialGraph(left.nodes, {("X1", "X2"): None, ("X1", "X4"): None}, (("X2", "X4"),))
        with pytest.raises(UndirectedEdge):
            redundant_edge_check(bad, right, scenario("redundant_edge").table())

    def test_prune_stage(self):
        s = scenario("redundant_edge")
        r = prune_pipeline(s.population_marginals(), PruneOptions(triangles=tuple(self.triangles())))
        assert r.edge.decision == "remove"
        for c in r.candidates:
            if c.graph.adjacent("X1", "X4"):
                assert not c.alive
        base = prune_pipeline(s.population_marginals())
        hit = sum(c.alive and c.graph.adjacent("X1", "X4") for c in base.candidates)
        assert sum(any(e.rule == R6 for e in c.ledger) for c in r.candidates) == hit > 0
        assert generating_class_alive(r, s.graph.dag) is True


TOPOLOGIES = {
    "one": ("XYABC", [("X", "A"), ("X", "B"), ("Y", "B"), ("Y", "C")], SETS),
    "two": ("XYABC", [("X", "A"), ("A", "C"), ("C", "Y"), ("X", "B"), ("Y", "B")], SETS),
    "three": (
        ("X1", "X2", "X3", "X4"),
        [("X1", "X2"), ("X1", "X3"), ("X2", "X4"), ("X3", "X4")],
        [("X1", "X2", "X4"), ("X1", "X3", "X4")],
    ),
}
coefficient = st.tuples(st.floats(0.2, 0.8), st.sampled_from([-1, 1])).map(lambda t: t[0] * t[1])


@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.sampled_from(sorted(TOPOLOGIES)), st.lists(coefficient, min_size=5, max_size=5))
def test_soundness(topology, coeffs):
    nodes, edges, sets = TOPOLOGIES[topology]
    try:
        w = calibrate_standardized(Dag(nodes, edges), dict(zip(edges, coeffs)))
    except StandardizationInfeasible:
        assume(False)
    r = prune_pipeline(population_marginals(implied_covariance(w), sets))
    # None means the class was never enumerated: the draw is unfaithful (paths cancel)
    assert generating_class_alive(r, w.dag) is not False


@pytest.mark.parametrize("name", ["case_one", "case_two", "case_three", "redundant_edge"])
def test_fixture_truth_survives(name):
    s = scenario(name)
    assert generating_class_alive(prune_pipeline(s.population_marginals()), s.graph.dag) is True
