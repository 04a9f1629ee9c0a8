import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trekunify.errors import UnknownPair, ZeroCorrelation
from trekunify.fixtures import scenario
from trekunify.graph import CorrelationMatrix, implied_covariance, weighted
from trekunify.marginals import PartialCorrelationTable, build_correlation_table, pair, population_marginals
from trekunify.planner import (
    TrekHypothesis,
    chain_membership_test,
    hypothesize_treks,
    plan,
    planned_tests,
    propose_measurements,
    second_trek_membership_test,
    two_trek_decomposition_test,
)
from trekunify.unify import LedgerEntry, R3

PLANNING = scenario("planning")
EDGES = [("X", "A"), ("A", "C"), ("C", "F"), ("Y", "E"), ("E", "D"), ("D", "F"), ("X", "B"), ("Y", "B")]


def full_table(w):
    corr = implied_covariance(w)
    return build_correlation_table(population_marginals(corr, [corr.variables]))


def edited(table, **changes):
    """Copy of a table with some correlations overwritten, e.g. CF=0.3."""
    known = dict(table.known)
    for k, r in changes.items():
        known[pair(*k)] = (r, known[pair(*k)][1])
    return PartialCorrelationTable(known, table.union_variables, table.measured_sets)


@pytest.fixture(scope="module")
def truth():
    return full_table(PLANNING.graph)


@pytest.fixture(scope="module")
def after_bfc():
    corr = implied_covariance(PLANNING.graph)
    return PLANNING.table().with_marginal(population_marginals(corr, [("B", "F", "C")], "n")[0])


class TestHypotheses:
    def test_reference_chains(self):
        hyps = {str(h) for h in hypothesize_treks(PLANNING.table())}
        assert {"X-A-C-F", "Y-E-D-F"} <= hyps

    def test_monotone_evidence(self):
        for h in hypothesize_treks(PLANNING.table()):
            mags = [r for _, r in h.evidence]
            assert mags == sorted(mags, reverse=True) and len(set(mags)) == len(mags)

    def test_all_equal_is_empty(self):
        corr = CorrelationMatrix("UABC", [[1, .4, .4, .4], [.4, 1, .2, .2], [.4, .2, 1, .2], [.4, .2, .2, 1]])
        assert hypothesize_treks(build_correlation_table(population_marginals(corr, ["UABC"])), ["U"]) == []

    def test_explicit_anchor(self):
        hyps = hypothesize_treks(PLANNING.table(), ["Y"])
        assert all(h.endpoints[0] == "Y" for h in hyps) and hyps


class TestChainMembership:
    def test_true_graph(self, truth):
        r = chain_membership_test(truth, TrekHypothesis(("X", "F"), ("A", "C")))
        assert r.passed and r.max_residual <= 1e-9
        assert len(r.residuals) == 3  # every pair along the chain is known here

    def test_perturbed(self, truth):
        bumped = edited(truth, CF=truth.get("C", "F") + 0.1)
        assert not chain_membership_test(bumped, ["X", "A", "C", "F"]).passed

    def test_vacuous(self, truth):
        r = chain_membership_test(truth, ["X", "F"])
        assert r.passed and "vacuous" in r.note

    def test_unknown_pair(self):
        with pytest.raises(UnknownPair):
            chain_membership_test(PLANNING.table(), ["X", "A", "C", "F"])

    def test_zero(self, truth):
        with pytest.raises(ZeroCorrelation):
            chain_membership_test(truth, ["X", "E", "F"])

    def test_wrong_interior_fails(self, truth):
        assert not chain_membership_test(truth, ["X", "B", "C", "F"]).passed


coef = st.tuples(st.floats(0.2, 0.9), st.sampled_from([-1, 1])).map(lambda t: t[0] * t[1])


@settings(max_examples=200, deadline=None)
@given(st.lists(coef, min_size=3, max_size=3))
def test_chain_passes_on_real_trek(cs):
    w = weighted("XACF", dict(zip([("X", "A"), ("A", "C"), ("C", "F")], cs)))
    assert chain_membership_test(full_table(w), ["X", "A", "C", "F"]).passed


@settings(max_examples=200, deadline=None)
@given(st.lists(coef, min_size=3, max_size=3))
def test_chain_fails_without_interior_edge(cs):
    # A hangs off X instead of lying between X and C
    w = weighted("XACF", dict(zip([("X", "A"), ("X", "C"), ("C", "F")], cs)))
    assert not chain_membership_test(full_table(w), ["X", "A", "C", "F"]).passed


class TestTwoTrek:
    def test_true_graph(self, truth):
        r = two_trek_decomposition_test(truth, "B", "F")
        assert r.passed and r.max_residual <= 1e-9

    def test_third_trek(self):
        from trekunify.graph import Dag, calibrate_standardized

        coeff = {e: 0.6 for e in EDGES} | {("B", "F"): 0.2}
        w = calibrate_standardized(Dag(PLANNING.graph.nodes, coeff), coeff)
        assert not two_trek_decomposition_test(full_table(w), "B", "F").passed

    def test_independent(self):
        t = build_correlation_table(population_marginals(CorrelationMatrix("XYBF", [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]), ["XYBF"]))
        assert two_trek_decomposition_test(t, "B", "F").passed

    def test_unknown(self):
        with pytest.raises(UnknownPair):
            two_trek_decomposition_test(PLANNING.table(), "B", "F")


class TestSecondTrek:
    def test_true_graph(self, truth):
        r = second_trek_membership_test(truth, "E")
        assert r.passed and r.max_residual <= 1e-9
        assert second_trek_membership_test(truth, "D").passed

    def test_off_trek_node(self):
        from trekunify.graph import Dag, calibrate_standardized

        coeff = {e: 0.6 for e in EDGES} | {("Y", "G"): 0.6}
        w = calibrate_standardized(Dag((*PLANNING.graph.nodes, "G"), coeff), coeff)
        assert not second_trek_membership_test(full_table(w), "G").passed

    def test_no_second_trek(self, truth):
        flat = edited(truth, BF=truth.get("X", "B") * truth.get("X", "F"))
        r = second_trek_membership_test(flat, "E")
        assert not r.passed and r.note and r.values["numerator"] == pytest.approx(0.0)

    def test_needs_ef(self, after_bfc):
        with pytest.raises(UnknownPair):
            second_trek_membership_test(after_bfc, "E")


class TestProposals:
    def test_budget_three(self):
        t = PLANNING.table()
        top = propose_measurements(hypothesize_treks(t), t, 3)[0]
        assert {"C", "F"} <= set(top.variables)
        assert top.variables == ("B", "C", "F")
        assert "chain:X-A-C-F" in top.enabled_tests and "two-trek:B-F|X,Y" in top.enabled_tests
        assert top.score == len(top.enabled_tests)

    def test_budget_two(self):
        t = PLANNING.table()
        assert propose_measurements(hypothesize_treks(t), t, 2)[0].variables == ("C", "F")

    def test_never_already_measured(self, after_bfc):
        for p in propose_measurements(hypothesize_treks(after_bfc), after_bfc, 3):
            assert not after_bfc.jointly_measured(p.variables)

    def test_nothing_pending(self, truth):
        assert propose_measurements(hypothesize_treks(truth), truth, 3) == []

    def test_deferred_constraints_count(self):
        e = LedgerEntry(R3, "R3:x", "d", "deferred", {}, (("A", "B"),))
        t = PLANNING.table()
        props = {p.variables: p for p in propose_measurements([], t, 2, deferred=[e])}
        assert props[("A", "B")].enabled_tests == ("R3:x",)

    def test_budget_validated(self):
        with pytest.raises(ValueError):
            propose_measurements([], PLANNING.table(), 1)

    def test_reproducible(self):
        t = PLANNING.table()
        assert plan(t, 3).to_json() == plan(t, 3).to_json()


class TestAfterMeasurement:
    def test_evaluated(self, after_bfc):
        results = {r.name: r for r in plan(after_bfc, 3).results}
        assert results["chain:X-A-C-F"].passed
        assert results["two-trek:B-F|X,Y"].passed
        assert results["second-trek:C|B-F"].passed
        assert not results["chain:X-B-C-F"].passed
        for name in ("chain:X-A-C-F", "two-trek:B-F|X,Y", "second-trek:C|B-F"):
            assert results[name].max_residual <= 1e-9

    def test_ef_completes_the_picture(self, after_bfc):
        corr = implied_covariance(PLANNING.graph)
        t = after_bfc.with_marginal(population_marginals(corr, [("E", "F")], "k")[0])
        r = second_trek_membership_test(t, "E")
        assert r.passed and r.max_residual <= 1e-9

    def test_tests_are_pure(self, after_bfc):
        before = dict(after_bfc.known)
        tests = planned_tests(hypothesize_treks(after_bfc), after_bfc)
        for t in tests:
            if not t.missing(after_bfc):
                t.run(after_bfc, None)
        assert after_bfc.known == before

    def test_json(self, after_bfc):
        doc = json.loads(plan(after_bfc, 3).to_json())
        assert doc["budget"] == 3 and doc["proposals"] and doc["evaluated_tests"]
