"""Directed acyclic graphs, treks and the trek-rule correlation.

A :class:`WeightedDag` is a linear structural equation model on
standardized variables.  Two independent routes to the implied
correlations are provided:

* :func:`trek_correlation` sums, over every trek between two nodes, the
  product of the edge coefficients on the trek;
* :func:`implied_covariance` solves ``X = B X + e`` in matrix form.

Agreement of the two routes is the trek rule, and the test-suite checks it
on random graphs.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    CycleError,
    GraphParseError,
    NodeSetMismatch,
    StandardizationInfeasible,
    UnknownVariable,
)

Edge = tuple[str, str]

# disturbance variances below this are treated as deterministic relations
DETERMINISM_FLOOR = 1e-9


@dataclass(frozen=True)
class Dag:
    """Immutable DAG; ``nodes`` keeps the declaration order."""

    nodes: tuple[str, ...]
    edges: frozenset[Edge] = frozenset()

    def __init__(self, nodes: Iterable[str], edges: Iterable[Edge] = ()):
        nodes = tuple(nodes)
        edge_list = [tuple(e) for e in edges]
        if len(set(nodes)) != len(nodes):
            raise ValueError(f"duplicate node names in {nodes}")
        for n in nodes:
            if not isinstance(n, str) or not n:
                raise ValueError(f"node names must be nonempty strings, got {n!r}")
        known = set(nodes)
        for parent, child in edge_list:
            if parent == child:
                raise ValueError(f"self-loop on {parent!r}")
            for v in (parent, child):
                if v not in known:
                    raise UnknownVariable(v)
        if len(set(edge_list)) != len(edge_list):
            raise ValueError("duplicate edges")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", frozenset(edge_list))
        # raises on cycles
        self.topological_order

    def __repr__(self) -> str:
        return f"Dag({self.encode()})"

    @cached_property
    def parents(self) -> dict[str, frozenset[str]]:
        pa: dict[str, set[str]] = {v: set() for v in self.nodes}
        for p, c in self.edges:
            pa[c].add(p)
        return {v: frozenset(s) for v, s in pa.items()}

    @cached_property
    def children(self) -> dict[str, frozenset[str]]:
        ch: dict[str, set[str]] = {v: set() for v in self.nodes}
        for p, c in self.edges:
            ch[p].add(c)
        return {v: frozenset(s) for v, s in ch.items()}

    @cached_property
    def topological_order(self) -> tuple[str, ...]:
        # Kahn's algorithm; ties broken by declaration order
        indeg = {v: len(self.parents[v]) for v in self.nodes}
        rank = {v: i for i, v in enumerate(self.nodes)}
        ready = sorted((v for v in self.nodes if indeg[v] == 0), key=rank.get)
        order: list[str] = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for c in sorted(self.children[v], key=rank.get):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort(key=rank.get)
        if len(order) != len(self.nodes):
            raise CycleError(sorted(v for v in self.nodes if indeg[v] > 0))
        return tuple(order)

    @cached_property
    def skeleton(self) -> frozenset[frozenset[str]]:
        return frozenset(frozenset(e) for e in self.edges)

    @cached_property
    def unshielded_colliders(self) -> frozenset[tuple[str, str, str]]:
        """Triples ``(a, c, b)`` with ``a -> c <- b``, ``a < b``, a and b non-adjacent."""
        out = set()
        for c in self.nodes:
            for a, b in itertools.combinations(sorted(self.parents[c]), 2):
                if frozenset((a, b)) not in self.skeleton:
                    out.add((a, c, b))
        return frozenset(out)

    def adjacent(self, u: str, v: str) -> bool:
        return frozenset((u, v)) in self.skeleton

    def check_node(self, v: str) -> None:
        if v not in self.parents:
            raise UnknownVariable(v)

    def descendants(self, v: str) -> frozenset[str]:
        """Strict descendants of ``v``."""
        self.check_node(v)
        seen: set[str] = set()
        stack = list(self.children[v])
        while stack:
            u = stack.pop()
            if u not in seen:
                seen.add(u)
                stack.extend(self.children[u])
        return frozenset(seen)

    def ancestors_of(self, vs: Iterable[str]) -> frozenset[str]:
        """``vs`` together with all their ancestors."""
        seen = set(vs)
        stack = list(seen)
        while stack:
            u = stack.pop()
            for p in self.parents[u]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return frozenset(seen)

    def directed_paths(self, start: str, end: str) -> list[tuple[str, ...]]:
        """All directed paths from ``start`` to ``end`` (``(start,)`` if equal)."""
        self.check_node(start)
        self.check_node(end)
        out: list[tuple[str, ...]] = []

        def walk(path: list[str]) -> None:
            v = path[-1]
            if v == end:
                out.append(tuple(path))
                return
            for c in sorted(self.children[v]):
                path.append(c)
                walk(path)
                path.pop()

        walk([start])
        return out

    def encode(self) -> str:
        """Canonical text encoding, e.g. ``"A,B,C|A->B;C->B"``."""
        arcs = ";".join(f"{p}->{c}" for p, c in sorted(self.edges))
        return ",".join(sorted(self.nodes)) + "|" + arcs

    def restricted(self, keep: Iterable[str]) -> "Dag":
        keep = set(keep)
        return Dag(
            [v for v in self.nodes if v in keep],
            [(p, c) for p, c in self.edges if p in keep and c in keep],
        )


@dataclass(frozen=True)
class WeightedDag:
    dag: Dag
    coeff: Mapping[Edge, float]
    disturbance_var: Mapping[str, float] = field(default_factory=dict)

    @property
    def nodes(self) -> tuple[str, ...]:
        return self.dag.nodes

    def coefficient(self, parent: str, child: str) -> float:
        return self.coeff[(parent, child)]


@dataclass(frozen=True)
class Trek:
    """Two directed paths out of ``source``; ``left`` and ``right`` both start at it.

    A directed path from x to y is the trek with ``source == x`` and
    ``left == (x,)``.
    """

    source: str
    left: tuple[str, ...]
    right: tuple[str, ...]

    def __post_init__(self):
        if self.left[0] != self.source or self.right[0] != self.source:
            raise ValueError("both trek sides must start at the source")
        if len(self.left) == 1 and len(self.right) == 1:
            raise ValueError("a trek needs at least one edge")
        if set(self.left) & set(self.right) != {self.source}:
            raise ValueError("trek sides may only meet at the source")

    @property
    def terminals(self) -> tuple[str, str]:
        return self.left[-1], self.right[-1]

    @property
    def edges(self) -> list[Edge]:
        return list(zip(self.left, self.left[1:])) + list(zip(self.right, self.right[1:]))

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset(self.left) | frozenset(self.right)

    def __str__(self) -> str:
        left = "<-".join(reversed(self.left))
        right = "->".join(self.right)
        if len(self.left) == 1:
            return right
        if len(self.right) == 1:
            return left
        return left + right[len(self.source):]


class CorrelationMatrix:
    """Named symmetric matrix with unit diagonal.

    Construction validates symmetry (1e-12), the unit diagonal and the
    [-1, 1] range.  The stored array is read-only.
    """

    def __init__(self, variables: Sequence[str], values, *, atol: float = 1e-12):
        values = np.array(values, dtype=float)
        variables = tuple(variables)
        k = len(variables)
        if values.shape != (k, k):
            raise ValueError(f"expected a {k}x{k} matrix, got {values.shape}")
        if len(set(variables)) != k:
            raise ValueError("duplicate variable names")
        if not np.all(np.isfinite(values)):
            raise ValueError("correlation matrix has non-finite entries")
        if np.max(np.abs(values - values.T), initial=0.0) > atol:
            raise ValueError("correlation matrix is not symmetric")
        if np.max(np.abs(np.diag(values) - 1.0), initial=0.0) > atol:
            raise ValueError("correlation matrix diagonal is not 1")
        values = 0.5 * (values + values.T)
        np.fill_diagonal(values, 1.0)
        if np.max(np.abs(values), initial=0.0) > 1.0 + atol:
            raise ValueError("correlation outside [-1, 1]")
        values = np.clip(values, -1.0, 1.0)
        values.flags.writeable = False
        self.variables = variables
        self.values = values
        self._index = {v: i for i, v in enumerate(variables)}

    def index(self, v: str) -> int:
        try:
            return self._index[v]
        except KeyError:
            raise UnknownVariable(v) from None

    def __getitem__(self, pair: tuple[str, str]) -> float:
        x, y = pair
        return float(self.values[self.index(x), self.index(y)])

    def __contains__(self, v: str) -> bool:
        return v in self._index

    def restrict(self, keep: Sequence[str]) -> "CorrelationMatrix":
        idx = [self.index(v) for v in keep]
        return CorrelationMatrix(keep, self.values[np.ix_(idx, idx)])

    def __repr__(self) -> str:
        return f"CorrelationMatrix({list(self.variables)})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorrelationMatrix):
            return NotImplemented
        return self.variables == other.variables and np.array_equal(self.values, other.values)


def calibrate_standardized(dag: Dag, coeff: Mapping[Edge, float]) -> WeightedDag:
    """Choose disturbance variances so every variable has unit variance.

    Nodes are processed in topological order; each node's disturbance
    variance is ``1 - b' S b`` with ``b`` its parent coefficients and ``S``
    the already-known covariance of its parents.

    Raises
    ------
    StandardizationInfeasible
        If some disturbance variance falls below ``DETERMINISM_FLOOR``.
    """
    coeff = {tuple(e): float(a) for e, a in coeff.items()}
    if set(coeff) != set(dag.edges):
        missing = set(dag.edges) - set(coeff)
        extra = set(coeff) - set(dag.edges)
        raise ValueError(f"coefficients must cover exactly the edges (missing {missing}, extra {extra})")
    for e, a in coeff.items():
        if not math.isfinite(a) or a == 0.0:
            raise ValueError(f"coefficient on {e} must be finite and nonzero, got {a}")

    order = dag.topological_order
    pos = {v: i for i, v in enumerate(order)}
    n = len(order)
    cov = np.zeros((n, n))
    dvar: dict[str, float] = {}
    for v in order:
        i = pos[v]
        pa = sorted(dag.parents[v], key=pos.get)
        idx = [pos[p] for p in pa]
        b = np.array([coeff[(p, v)] for p in pa])
        if pa:
            s = cov[np.ix_(idx, idx)]
            explained = float(b @ s @ b)
            # covariance of v with earlier nodes: sum_p b_p cov(p, .)
            row = b @ cov[idx, :]
        else:
            explained = 0.0
            row = np.zeros(n)
        d = 1.0 - explained
        if d < DETERMINISM_FLOOR:
            raise StandardizationInfeasible(v, d)
        dvar[v] = d
        cov[i, :] = row
        cov[:, i] = row
        cov[i, i] = 1.0
    return WeightedDag(dag, coeff, {v: dvar[v] for v in dag.nodes})


def check_calibrated(wdag: WeightedDag) -> None:
    if set(wdag.disturbance_var) != set(wdag.nodes):
        raise ValueError("WeightedDag is not calibrated; use calibrate_standardized")


def enumerate_treks(wdag: WeightedDag | Dag, x: str, y: str) -> list[Trek]:
    """Every trek between ``x`` and ``y``, ordered by source then paths.

    For each node ``s`` the directed paths ``s ~> x`` and ``s ~> y`` are
    crossed, keeping the pairs that share only ``s``.
    """
    dag = wdag.dag if isinstance(wdag, WeightedDag) else wdag
    dag.check_node(x)
    dag.check_node(y)
    if x == y:
        raise ValueError("trek endpoints must differ")
    anc = dag.ancestors_of([x]) & dag.ancestors_of([y])
    treks = []
    for s in sorted(anc):
        for left in dag.directed_paths(s, x):
            left_set = set(left)
            for right in dag.directed_paths(s, y):
                if left_set & set(right) != {s}:
                    continue
                treks.append(Trek(s, left, right))
    treks.sort(key=lambda t: (t.source, t.left, t.right))
    return treks


def trek_correlation(wdag: WeightedDag, x: str, y: str) -> float:
    """Correlation of ``x`` and ``y`` as a sum of trek coefficient products."""
    check_calibrated(wdag)
    total = 0.0
    for t in enumerate_treks(wdag, x, y):
        total += math.prod(wdag.coeff[e] for e in t.edges)
    return total


def implied_covariance(wdag: WeightedDag) -> CorrelationMatrix:
    """Covariance of the linear system, ``(I - B)^-1 Omega (I - B)^-T``."""
    check_calibrated(wdag)
    nodes = wdag.nodes
    pos = {v: i for i, v in enumerate(nodes)}
    n = len(nodes)
    B = np.zeros((n, n))
    for (p, c), a in wdag.coeff.items():
        B[pos[c], pos[p]] = a
    omega = np.diag([wdag.disturbance_var[v] for v in nodes])
    inv = np.linalg.solve(np.eye(n) - B, np.eye(n))
    cov = inv @ omega @ inv.T
    return CorrelationMatrix(nodes, 0.5 * (cov + cov.T), atol=1e-9)


def d_separated(dag: Dag, x: str, y: str, z: Iterable[str] = ()) -> bool:
    """True iff ``z`` blocks every path between ``x`` and ``y``.

    Reachability over (node, direction) states: a non-collider passes when
    unconditioned, a collider passes when it or a descendant is in ``z``.
    """
    z = frozenset(z)
    for v in (x, y, *z):
        dag.check_node(v)
    if x == y:
        raise ValueError("d-separation needs two distinct nodes")
    if x in z or y in z:
        raise ValueError("endpoints may not be in the conditioning set")
    opens_collider = dag.ancestors_of(z)
    # direction "up": arrived from a child; "down": arrived from a parent
    queue = deque([(x, "up")])
    seen = set()
    while queue:
        v, d = queue.popleft()
        if (v, d) in seen:
            continue
        seen.add((v, d))
        if v == y:
            return False
        if d == "up" and v not in z:
            for p in dag.parents[v]:
                queue.append((p, "up"))
            for c in dag.children[v]:
                queue.append((c, "down"))
        elif d == "down":
            if v not in z:
                for c in dag.children[v]:
                    queue.append((c, "down"))
            if v in opens_collider:
                for p in dag.parents[v]:
                    queue.append((p, "up"))
    return True


def _check_same_nodes(d1: Dag, d2: Dag) -> None:
    if set(d1.nodes) != set(d2.nodes):
        raise NodeSetMismatch(sorted(d1.nodes), sorted(d2.nodes))


def class_key(dag: Dag) -> tuple[frozenset, frozenset]:
    """Skeleton plus unshielded colliders; equal keys mean Markov equivalence."""
    return dag.skeleton, dag.unshielded_colliders


def markov_equivalent(d1: Dag, d2: Dag) -> bool:
    _check_same_nodes(d1, d2)
    return class_key(d1) == class_key(d2)


def equivalence_classes(graphs: Sequence[Dag]) -> list[list[Dag]]:
    """Partition ``graphs`` into Markov equivalence classes.

    Members are sorted by canonical encoding; classes by their first member.
    """
    graphs = list(graphs)
    for g in graphs[1:]:
        _check_same_nodes(graphs[0], g)
    buckets: dict[tuple, list[Dag]] = {}
    for g in graphs:
        buckets.setdefault(class_key(g), []).append(g)
    classes = [sorted(b, key=Dag.encode) for b in buckets.values()]
    classes.sort(key=lambda c: c[0].encode())
    return classes


def all_dags(nodes: Sequence[str]) -> Iterator[Dag]:
    """Every labelled DAG on ``nodes`` (brute force; fine up to 5 nodes)."""
    pairs = list(itertools.combinations(nodes, 2))
    for states in itertools.product((0, 1, 2), repeat=len(pairs)):
        edges = []
        for (u, v), s in zip(pairs, states):
            if s == 1:
                edges.append((u, v))
            elif s == 2:
                edges.append((v, u))
        try:
            yield Dag(nodes, edges)
        except CycleError:
            continue


# -- text format -------------------------------------------------------------


def parse_graph(text: str, source: str = "<string>") -> WeightedDag:
    """Parse ``node <name>`` / ``<parent> -> <child> <coef>`` lines.

    Returns a calibrated WeightedDag.  Errors carry the line number.
    """
    nodes: list[str] = []
    coeff: dict[Edge, float] = {}
    edge_line: dict[Edge, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "node":
            if len(parts) != 2:
                raise GraphParseError(source, lineno, "expected 'node <name>'")
            if parts[1] in nodes:
                raise GraphParseError(source, lineno, f"duplicate node {parts[1]!r}")
            nodes.append(parts[1])
        elif len(parts) == 4 and parts[1] == "->":
            p, _, c, a = parts
            for v in (p, c):
                if v not in nodes:
                    raise GraphParseError(source, lineno, f"undeclared node {v!r}")
            if p == c:
                raise GraphParseError(source, lineno, f"self-loop on {p!r}")
            if (p, c) in coeff:
                raise GraphParseError(
                    source, lineno, f"duplicate edge {p} -> {c} (first on line {edge_line[(p, c)]})"
                )
            try:
                coeff[(p, c)] = float(a)
            except ValueError:
                raise GraphParseError(source, lineno, f"bad coefficient {a!r}") from None
            if coeff[(p, c)] == 0.0 or not math.isfinite(coeff[(p, c)]):
                raise GraphParseError(source, lineno, "coefficient must be finite and nonzero")
            edge_line[(p, c)] = lineno
            try:
                Dag(nodes, coeff)
            except CycleError as exc:
                raise GraphParseError(source, lineno, f"edge {p} -> {c} closes a cycle") from exc
        else:
            raise GraphParseError(source, lineno, f"cannot parse {raw.strip()!r}")
    if not nodes:
        raise GraphParseError(source, 0, "graph declares no nodes")
    return calibrate_standardized(Dag(nodes, coeff), coeff)


def format_graph(wdag: WeightedDag) -> str:
    lines = [f"node {v}" for v in wdag.nodes]
    for p, c in sorted(wdag.dag.edges):
        lines.append(f"{p} -> {c} {wdag.coeff[(p, c)]!r}")
    return "\n".join(lines) + "\n"


def weighted(nodes: Iterable[str], coeff: Mapping[Edge, float]) -> WeightedDag:
    """Shorthand: build and calibrate in one call."""
    return calibrate_standardized(Dag(nodes, coeff.keys()), coeff)


# -- random models -----------------------------------------------------------


def random_weighted_dag(rng: np.random.Generator, n_nodes: int, p: float = 0.4, bound: float = 0.8) -> WeightedDag:
    """Random calibrated DAG over ``V0..V{n-1}`` (edges only go forward); infeasible draws are redrawn."""
    nodes = [f"V{i}" for i in range(n_nodes)]
    while True:
        edges = [(nodes[i], nodes[j]) for i in range(n_nodes) for j in range(i + 1, n_nodes) if rng.random() < p]
        coeff = {}
        for e in edges:
            a = 0.0
            while a == 0.0:
                a = float(rng.uniform(-bound, bound))
            coeff[e] = a
        try:
            return calibrate_standardized(Dag(nodes, edges), coeff)
        except StandardizationInfeasible:
            continue


def max_trek_deviation(wdag: WeightedDag) -> float:
    oracle = implied_covariance(wdag)
    worst = 0.0
    for i, x in enumerate(wdag.nodes):
        for y in wdag.nodes[i + 1 :]:
            worst = max(worst, abs(trek_correlation(wdag, x, y) - oracle[x, y]))
    return worst
