"""Shared strategies and independent oracles.

The oracles deliberately avoid the package's own graph algorithms:
d-separation comes from networkx, covariances from a dense matrix solve.
"""

import itertools
import sys

import networkx as nx
import numpy as np
import pytest
from hypothesis import strategies as st

from trekunify.graph import Dag, calibrate_standardized
from trekunify.errors import StandardizationInfeasible


def nx_dsep(dag: Dag, x, y, z=()) -> bool:
    g = nx.DiGraph()
    g.add_nodes_from(dag.nodes)
    g.add_edges_from(dag.edges)
    return nx.is_d_separator(g, {x}, {y}, set(z))


def oracle_correlation(nodes, coeff):
    """Correlation matrix of a standardized linear SEM, built without the package."""
    n = len(nodes)
    pos = {v: i for i, v in enumerate(nodes)}
    B = np.zeros((n, n))
    for (p, c), a in coeff.items():
        B[pos[c], pos[p]] = a
    # disturbance variances from unit-variance targets, solved in topological order
    g = nx.DiGraph()
    g.add_nodes_from(nodes)
    g.add_edges_from(coeff)
    cov = np.zeros((n, n))
    for v in nx.lexicographical_topological_sort(g):
        i = pos[v]
        pa = [pos[p] for p in g.predecessors(v)]
        b = B[i, pa]
        for j in range(n):
            if j != i and cov[j, j] > 0:
                cov[i, j] = cov[j, i] = b @ cov[pa, j] if pa else 0.0
        cov[i, i] = 1.0
    return cov


def brute_dags(nodes):
    """Every DAG over ``nodes`` as edge lists, via networkx acyclicity."""
    pairs = list(itertools.combinations(nodes, 2))
    for states in itertools.product((0, 1, 2), repeat=len(pairs)):
        edges = [(u, v) if s == 1 else (v, u) for (u, v), s in zip(pairs, states) if s]
        g = nx.DiGraph(edges)
        g.add_nodes_from(nodes)
        if nx.is_directed_acyclic_graph(g):
            yield edges


@st.composite
def random_models(draw, max_nodes=8, p=0.4, bound=0.8):
    """Calibrated WeightedDags over V0..Vk with forward edges; infeasible draws rejected."""
    k = draw(st.integers(2, max_nodes))
    nodes = [f"V{i}" for i in range(k)]
    coeff = {}
    for i, j in itertools.combinations(range(k), 2):
        if draw(st.floats(0, 1)) < p:
            a = draw(st.floats(-bound, bound).filter(lambda a: abs(a) > 1e-3))
            coeff[(nodes[i], nodes[j])] = a
    try:
        return calibrate_standardized(Dag(nodes, coeff), coeff)
    except StandardizationInfeasible:
        from hypothesis import reject

        reject()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
