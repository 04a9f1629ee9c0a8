"""Candidate unified DAGs and trek-rule pruning.

Pipeline stages:

1. conditional-independence facts from each marginal (``extract_ci``);
2. every DAG over the union of variables that reproduces those facts,
   grouped into Markov equivalence classes (``enumerate_candidates``);
3. correlation constraints implied by the trek rule, evaluated on the
   pairwise correlation table: magnitude inequalities (R3) and
   factorizations (R4);
4. optional residual checks for a latent connection (R5) or a redundant
   direct edge (R6).

Rule ids used in ledgers: R1-no-trek, R2-collider, R3-mediation-inequality,
R4-chain-order, R5-latent-residual, R6-redundant-edge.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import TooManyVariables, UndirectedEdge, UnknownPair, ZeroCorrelation
from .graph import Dag, WeightedDag, class_key, d_separated
from .marginals import (
    CiCatalog,
    MarginalDataset,
    PartialCorrelationTable,
    build_correlation_table,
    extract_ci,
    pair,
)
from .semsim import POPULATION_TOL, CiStatement

MAX_UNION_VARIABLES = 7
Z99 = 2.5758293035489004  # two-sided 99% normal quantile

R1 = "R1-no-trek"
R2 = "R2-collider"
R3 = "R3-mediation-inequality"
R4 = "R4-chain-order"
R5 = "R5-latent-residual"
R6 = "R6-redundant-edge"
RULES = (R1, R2, R3, R4, R5, R6)


# -- tolerance policy ----------------------------------------------------------


@dataclass(frozen=True)
class Tolerance:
    """Absolute tolerance in population mode, ``z * standard error`` otherwise.

    An explicit ``tol`` in sample mode replaces the standard-error band.
    """

    population: bool = True
    tol: float | None = None
    z: float = Z99

    def __post_init__(self):
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tolerance must be positive")

    def band(self, se: float = 0.0) -> float:
        if self.tol is not None:
            return self.tol
        if self.population:
            return POPULATION_TOL
        return self.z * se + 1e-12

    @classmethod
    def for_table(cls, table: PartialCorrelationTable, tol: float | None = None) -> "Tolerance":
        return cls(population=table.population, tol=tol)


# -- candidates and ledgers ----------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    rule: str
    constraint_id: str
    description: str
    outcome: str  # satisfied | violated | deferred | note
    evidence: Mapping[str, float] = field(default_factory=dict)
    missing: tuple[tuple[str, str], ...] = ()

    @property
    def violated(self) -> bool:
        return self.outcome == "violated"

    def to_dict(self) -> dict:
        out = {
            "rule": self.rule,
            "id": self.constraint_id,
            "description": self.description,
            "outcome": self.outcome,
            "evidence": {k: _jsonable(v) for k, v in self.evidence.items()},
        }
        if self.missing:
            out["missing"] = [list(p) for p in self.missing]
        return out


@dataclass(frozen=True)
class Candidate:
    """One Markov equivalence class of unified DAGs.

    ``graph`` is the representative (the member with the smallest canonical
    encoding).  Ledgers only grow; a ruled-out candidate never comes back.
    """

    graph: Dag
    members: tuple[Dag, ...] = ()
    status: str = "alive"
    ledger: tuple[LedgerEntry, ...] = ()

    @property
    def alive(self) -> bool:
        return self.status == "alive"

    @property
    def key(self) -> str:
        return self.graph.encode()

    def resolved_ids(self) -> set[str]:
        return {e.constraint_id for e in self.ledger if e.outcome in ("satisfied", "violated")}

    def deferred(self) -> list[LedgerEntry]:
        """Deferred entries not resolved by a later entry."""
        resolved = self.resolved_ids()
        out, seen = [], set()
        for e in self.ledger:
            if e.outcome == "deferred" and e.constraint_id not in resolved and e.constraint_id not in seen:
                out.append(e)
                seen.add(e.constraint_id)
        return out

    def append(self, entries: Iterable[LedgerEntry]) -> "Candidate":
        entries = tuple(entries)
        if not entries:
            return self
        have = {(e.constraint_id, e.outcome) for e in self.ledger}
        fresh = tuple(e for e in entries if (e.constraint_id, e.outcome) not in have)
        status = "ruled_out" if (not self.alive or any(e.violated for e in fresh)) else "alive"
        return replace(self, ledger=self.ledger + fresh, status=status)

    def to_dict(self) -> dict:
        return {
            "graph": self.graph.encode(),
            "edges": [list(e) for e in sorted(self.graph.edges)],
            "members": [m.encode() for m in self.members],
            "status": self.status,
            "ledger": [e.to_dict() for e in self.ledger],
        }


# -- enumeration ---------------------------------------------------------------


def _reaches(children: Mapping[str, set[str]], src: str, dst: str) -> bool:
    stack, seen = [src], {src}
    while stack:
        u = stack.pop()
        if u == dst:
            return True
        for c in children[u]:
            if c not in seen:
                seen.add(c)
                stack.append(c)
    return False


def _skeleton_classes(
    nodes: tuple[str, ...],
    skeleton: tuple[tuple[str, str], ...],
    forced: Mapping[tuple[str, str, str], bool],
) -> dict[frozenset, list[Dag]]:
    """All acyclic orientations of ``skeleton`` honouring the forced collider states."""
    adj = {frozenset(e) for e in skeleton}
    triples_at: dict[str, list[tuple[str, str, str]]] = defaultdict(list)
    for t in forced:
        triples_at[t[1]].append(t)
    parents: dict[str, set[str]] = {v: set() for v in nodes}
    children: dict[str, set[str]] = {v: set() for v in nodes}
    oriented: dict[frozenset, tuple[str, str]] = {}
    classes: dict[frozenset, list[Dag]] = defaultdict(list)

    def consistent(v: str) -> bool:
        for a, c, b in triples_at[v]:
            ea, eb = oriented.get(frozenset((a, c))), oriented.get(frozenset((b, c)))
            if ea is None or eb is None:
                continue
            if (ea == (a, c) and eb == (b, c)) != forced[(a, c, b)]:
                return False
        return True

    def walk(i: int) -> None:
        if i == len(skeleton):
            dag = Dag(nodes, oriented.values())
            classes[dag.unshielded_colliders].append(dag)
            return
        u, v = skeleton[i]
        for p, c in ((u, v), (v, u)):
            if _reaches(children, c, p):
                continue
            oriented[frozenset((p, c))] = (p, c)
            parents[c].add(p)
            children[p].add(c)
            if consistent(c) and consistent(p):
                walk(i + 1)
            parents[c].discard(p)
            children[p].discard(c)
            del oriented[frozenset((p, c))]

    del adj
    walk(0)
    return classes


def _consistent(dag: Dag, statements: Sequence[tuple], faithfulness: bool) -> bool:
    for x, y, given, independent in statements:
        if not independent and not faithfulness:
            continue
        if d_separated(dag, x, y, given) != independent:
            return False
    return True


def _connected(skeleton: Iterable[tuple[str, str]], x: str, y: str) -> bool:
    nbr: dict[str, set[str]] = defaultdict(set)
    for u, v in skeleton:
        nbr[u].add(v)
        nbr[v].add(u)
    stack, seen = [x], {x}
    while stack:
        u = stack.pop()
        if u == y:
            return True
        for w in nbr[u] - seen:
            seen.add(w)
            stack.append(w)
    return False


def _forced_colliders(
    skeleton: tuple[tuple[str, str], ...], independences: Sequence[tuple]
) -> dict[tuple[str, str, str], bool] | None:
    """Collider state of unshielded triples fixed by independence statements.

    For an unshielded ``a - c - b``, a statement ``a _||_ b | S`` forces ``c``
    to be a non-collider when ``c`` is in ``S`` and a collider otherwise.
    Returns None when two statements disagree.
    """
    adj = {frozenset(e) for e in skeleton}
    nbr: dict[str, set[str]] = defaultdict(set)
    for u, v in skeleton:
        nbr[u].add(v)
        nbr[v].add(u)
    by_pair: dict[frozenset, list[frozenset]] = defaultdict(list)
    for x, y, given, _ in independences:
        by_pair[frozenset((x, y))].append(given)
    forced: dict[tuple[str, str, str], bool] = {}
    for c, ns in nbr.items():
        for a, b in itertools.combinations(sorted(ns), 2):
            if frozenset((a, b)) in adj:
                continue
            for given in by_pair.get(frozenset((a, b)), ()):
                state = c not in given
                if forced.setdefault((a, c, b), state) != state:
                    return None
    return forced


def _skeleton_worker(args) -> list[tuple[Dag, tuple[Dag, ...]]]:
    nodes, skeleton, statements, faithfulness = args
    independences = [s for s in statements if s[3]]
    if faithfulness:
        for x, y, _, independent in statements:
            if not independent and not _connected(skeleton, x, y):
                return []
    forced = _forced_colliders(skeleton, independences)
    if forced is None:
        return []
    out = []
    for members in _skeleton_classes(nodes, skeleton, forced).values():
        members = sorted(members, key=Dag.encode)
        if _consistent(members[0], statements, faithfulness):
            out.append((members[0], tuple(members)))
    return out


def _worker_count(workers: int | None) -> int:
    if workers is not None:
        return max(1, workers)
    env = os.environ.get("TREK_UNIFY_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


@lru_cache(maxsize=64)
def _enumerate_cached(
    nodes: tuple[str, ...], statements: frozenset, forbidden: frozenset, faithfulness: bool, workers: int
) -> tuple[tuple[Dag, tuple[Dag, ...]], ...]:
    stmts = sorted(statements, key=lambda s: (s[0], s[1], sorted(s[2]), s[3]))
    blocked = set(forbidden) | {frozenset((s[0], s[1])) for s in stmts if s[3]}
    allowed = [p for p in itertools.combinations(nodes, 2) if frozenset(p) not in blocked]
    jobs = []
    for mask in range(1 << len(allowed)):
        skeleton = tuple(p for i, p in enumerate(allowed) if mask >> i & 1)
        jobs.append((nodes, skeleton, stmts, faithfulness))
    if workers > 1 and len(jobs) > 64:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_skeleton_worker, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    else:
        results = [_skeleton_worker(j) for j in jobs]
    found = [item for r in results for item in r]
    found.sort(key=lambda item: item[0].encode())
    return tuple(found)


def enumerate_candidates(
    union_vars: Iterable[str],
    catalog: CiCatalog | Iterable[CiStatement],
    forbidden_edges: Iterable[Iterable[str]] = (),
    *,
    faithfulness: bool = True,
    workers: int | None = None,
) -> list[Candidate]:
    """Markov equivalence classes of DAGs reproducing every CI statement.

    Independent statements must be d-separations (Markov).  With
    ``faithfulness`` dependent statements must be d-connections too.  Pairs
    in ``forbidden_edges`` are never adjacent.  An empty result is a valid
    answer: no DAG over ``union_vars`` fits the catalog.
    """
    nodes = tuple(sorted(set(union_vars)))
    if len(nodes) > MAX_UNION_VARIABLES:
        raise TooManyVariables(f"{len(nodes)} variables; exhaustive search is limited to {MAX_UNION_VARIABLES}")
    statements = frozenset((s.x, s.y, s.given, s.independent) for s in catalog)
    for x, y, given, _ in statements:
        missing = ({x, y} | set(given)) - set(nodes)
        if missing:
            raise ValueError(f"statement mentions variables outside the union: {sorted(missing)}")
    forbidden = frozenset(frozenset(p) for p in forbidden_edges)
    found = _enumerate_cached(nodes, statements, forbidden, faithfulness, _worker_count(workers))
    return [Candidate(rep, members) for rep, members in found]


# -- correlation constraints ---------------------------------------------------


@dataclass(frozen=True)
class TrekConstraint:
    """A correlation relation a candidate implies.

    ``pairs`` lists every correlation the relation reads; evaluation is
    deferred while any of them is unknown.
    """

    id: str
    rule: str
    kind: str  # inequality | factorization | residual_equation
    lhs: str
    rhs: str
    pairs: tuple[tuple[str, str], ...]
    evaluate: Callable[[PartialCorrelationTable, Tolerance], tuple[bool, dict]] = field(compare=False, repr=False)

    def missing(self, table: PartialCorrelationTable) -> tuple[tuple[str, str], ...]:
        return tuple(p for p in self.pairs if not table.is_known(*p))

    def describe(self) -> str:
        op = "<=" if self.kind == "inequality" else "="
        return f"{self.lhs} {op} {self.rhs}"

    def to_dict(self, table: PartialCorrelationTable | None = None) -> dict:
        out = {"id": self.id, "rule": self.rule, "kind": self.kind, "constraint": self.describe()}
        if table is not None:
            out["missing"] = [list(p) for p in self.missing(table)]
        return out


def _rho(u: str, v: str) -> str:
    return f"rho({u},{v})"


def _p(u: str, v: str) -> tuple[str, str]:
    return tuple(sorted((u, v)))


def _inequality(u: str, v: str, m: str, other: str) -> TrekConstraint:
    """|rho_uv| <= |rho_(m,other)| where other is u or v."""
    a, b = _p(u, v), _p(m, other)

    def ev(table: PartialCorrelationTable, tol: Tolerance):
        big, small = table.abs(*b), table.abs(*a)
        se = math.hypot(table.se(*a), table.se(*b))
        excess = small - big
        return excess > tol.band(se), {"|%s|" % _rho(*a): small, "|%s|" % _rho(*b): big, "excess": excess}

    return TrekConstraint(
        f"R3:{a[0]}-{a[1]}<={b[0]}-{b[1]}|{m}",
        R3,
        "inequality",
        f"|{_rho(*a)}|",
        f"|{_rho(*b)}|",
        (a, b),
        ev,
    )


def _factorization(u: str, v: str, m: str) -> TrekConstraint:
    """rho_uv = rho_um * rho_mv (m mediates every trek between u and v)."""
    uv, um, mv = _p(u, v), _p(u, m), _p(m, v)

    def ev(table: PartialCorrelationTable, tol: Tolerance):
        ruv, rum, rmv = table.get(*uv), table.get(*um), table.get(*mv)
        se = math.sqrt(table.se(*uv) ** 2 + (rmv * table.se(*um)) ** 2 + (rum * table.se(*mv)) ** 2)
        mag = abs(ruv) - abs(rum) * abs(rmv)
        signed = ruv - rum * rmv
        band = tol.band(se)
        violated = abs(mag) > band or (tol.population and abs(signed) > band)
        return violated, {"residual": mag, "signed_residual": signed}

    return TrekConstraint(
        f"R4:{uv[0]}-{uv[1]}={um[0]}-{um[1]}*{mv[0]}-{mv[1]}",
        R4,
        "factorization",
        _rho(*uv),
        f"{_rho(*um)}*{_rho(*mv)}",
        (uv, um, mv),
        ev,
    )


def _implied(table: PartialCorrelationTable, route: tuple) -> tuple[float, float] | None:
    """Value and standard error an unmeasured pair must take along one route."""
    kind, known_a, known_b = route
    ra, rb = table.get(*known_a), table.get(*known_b)
    sa, sb = table.se(*known_a), table.se(*known_b)
    if kind == "product":
        return ra * rb, math.hypot(rb * sa, ra * sb)
    if abs(rb) <= POPULATION_TOL:
        return None
    q = ra / rb
    return q, math.hypot(sa / rb, ra * sb / rb**2)


def _shared_factorization(target: tuple[str, str], r1: tuple, r2: tuple, m1: str, m2: str) -> TrekConstraint:
    """Two mediations that both determine the same unmeasured correlation must agree."""

    def route_text(route):
        kind, a, b = route
        return f"{_rho(*a)}*{_rho(*b)}" if kind == "product" else f"{_rho(*a)}/{_rho(*b)}"

    def ev(table: PartialCorrelationTable, tol: Tolerance):
        v1, v2 = _implied(table, r1), _implied(table, r2)
        if v1 is None or v2 is None:
            return False, {"note": "zero denominator; handled by the inequality"}
        (q1, s1), (q2, s2) = v1, v2
        band = tol.band(math.hypot(s1, s2))
        mag = abs(q1) - abs(q2)
        signed = q1 - q2
        violated = abs(mag) > band or (tol.population and abs(signed) > band)
        return violated, {"via_" + m1: q1, "via_" + m2: q2, "residual": mag}

    pairs = tuple(dict.fromkeys([r1[1], r1[2], r2[1], r2[2]]))
    return TrekConstraint(
        f"R4:{target[0]}-{target[1]}:{m1}~{m2}:{route_text(r1)}={route_text(r2)}",
        R4,
        "factorization",
        route_text(r1),
        route_text(r2),
        pairs,
        ev,
    )


def candidate_constraints(candidate: Candidate, table: PartialCorrelationTable) -> list[TrekConstraint]:
    """Trek-rule constraints the candidate class implies over the table's pairs.

    Every entailed ``u _||_ v | {m}`` (with u, v marginally dependent) puts
    ``m`` on every trek between u and v, so ``rho_uv = rho_um * rho_mv``.
    Triples measured together in one marginal are skipped: their content is
    already in the CI catalog.
    """
    g = candidate.graph
    nodes = sorted(g.nodes)
    out: dict[str, TrekConstraint] = {}
    routes: dict[tuple[str, str], list[tuple[tuple, str]]] = defaultdict(list)
    for u, v in itertools.combinations(nodes, 2):
        if d_separated(g, u, v):
            continue
        for m in nodes:
            if m in (u, v) or table.jointly_measured((u, v, m)):
                continue
            if not d_separated(g, u, v, [m]):
                continue
            for c in (_inequality(u, v, m, u), _inequality(u, v, m, v), _factorization(u, v, m)):
                out.setdefault(c.id, c)
            uv, um, mv = _p(u, v), _p(u, m), _p(m, v)
            known = {p: table.is_known(*p) for p in (uv, um, mv)}
            if sum(known.values()) == 2:
                if not known[uv]:
                    routes[uv].append((("product", um, mv), m))
                elif not known[um]:
                    routes[um].append((("ratio", uv, mv), m))
                else:
                    routes[mv].append((("ratio", uv, um), m))
    for target, rs in routes.items():
        rs = sorted(rs, key=lambda r: (r[1], r[0]))
        for (ra, ma), (rb, mb) in itertools.combinations(rs, 2):
            if ra == rb:
                continue
            c = _shared_factorization(target, ra, rb, ma, mb)
            out.setdefault(c.id, c)
    return sorted(out.values(), key=lambda c: c.id)


def _evaluate(
    candidate: Candidate, constraints: Iterable[TrekConstraint], table: PartialCorrelationTable, tol: Tolerance
) -> Candidate:
    if not candidate.alive:
        return candidate
    resolved = candidate.resolved_ids()
    entries = []
    for c in constraints:
        if c.id in resolved:
            continue
        missing = c.missing(table)
        if missing:
            entries.append(LedgerEntry(c.rule, c.id, c.describe(), "deferred", {}, missing))
            continue
        violated, evidence = c.evaluate(table, tol)
        entries.append(LedgerEntry(c.rule, c.id, c.describe(), "violated" if violated else "satisfied", evidence))
    return candidate.append(entries)


def mediation_inequality_prune(
    candidates: Sequence[Candidate], table: PartialCorrelationTable, tol: float | None = None
) -> list[Candidate]:
    """Rule out classes whose implied ``|rho_uv| <= |rho_um|`` bounds fail (R3)."""
    t = Tolerance.for_table(table, tol)
    out = []
    for cand in candidates:
        cs = [c for c in candidate_constraints(cand, table) if c.rule == R3]
        out.append(_evaluate(cand, cs, table, t))
    return out


def chain_order_prune(
    candidates: Sequence[Candidate], table: PartialCorrelationTable, tol: float | None = None
) -> list[Candidate]:
    """Rule out classes whose implied factorizations fail (R4)."""
    t = Tolerance.for_table(table, tol)
    out = []
    for cand in candidates:
        cs = [c for c in candidate_constraints(cand, table) if c.rule == R4]
        out.append(_evaluate(cand, cs, table, t))
    return out


def ci_prune(candidates: Sequence[Candidate], statements: Iterable[CiStatement], *, faithfulness: bool = True) -> list[Candidate]:
    """Check candidates against CI statements from new data (R1 / R2)."""
    statements = list(statements)
    out = []
    for cand in candidates:
        if not cand.alive:
            out.append(cand)
            continue
        entries = []
        for s in statements:
            if s.x not in cand.graph.nodes or s.y not in cand.graph.nodes or not s.given <= set(cand.graph.nodes):
                continue
            sep = d_separated(cand.graph, s.x, s.y, s.given)
            if s.independent:
                rule, ok = R1, sep
            elif faithfulness:
                rule, ok = R2, not sep
            else:
                continue
            entries.append(
                LedgerEntry(
                    rule,
                    f"{rule.split('-')[0]}:{s}",
                    f"{s} (from {s.source})",
                    "satisfied" if ok else "violated",
                    {"p_value": s.p_value},
                )
            )
        out.append(cand.append(entries))
    return out


def refine_with_new_marginal(
    candidates: Sequence[Candidate],
    table: PartialCorrelationTable,
    new_marginal: MarginalDataset,
    *,
    alpha: float = 0.01,
    tol: float | None = None,
    population: bool | None = None,
    faithfulness: bool = True,
) -> tuple[list[Candidate], PartialCorrelationTable]:
    """Add a marginal, check its CI facts, and re-evaluate every deferred constraint.

    A marginal that brings no unmeasured pair changes nothing.
    """
    new_pairs = [
        p for p in itertools.combinations(sorted(new_marginal.variables), 2) if not table.is_known(*p)
    ]
    if not new_pairs:
        return list(candidates), table
    table = table.with_marginal(new_marginal, population=population)
    catalog = extract_ci([new_marginal], alpha, population=population)
    out = ci_prune(candidates, catalog, faithfulness=faithfulness)
    out = mediation_inequality_prune(out, table, tol)
    out = chain_order_prune(out, table, tol)
    return out, table


# -- chain order ---------------------------------------------------------------


@dataclass(frozen=True)
class ChainOrder:
    verdict: str  # c_between | a_between | neither
    residual_c_between: float
    residual_a_between: float
    note: str = ""


def chain_order(table: PartialCorrelationTable, x: str, a: str, c: str, tol: float | None = None) -> ChainOrder:
    """Which of ``a``, ``c`` lies between ``x`` and the other on a single trek.

    ``c`` between x and a means ``|rho_xa| = |rho_ac| |rho_xc|``; ``a``
    between x and c means ``|rho_xc| = |rho_ac| |rho_xa|``.
    """
    t = Tolerance.for_table(table, tol)
    rxa, rxc, rac = table.get(x, a), table.get(x, c), table.get(a, c)
    for (p, q), r in (((x, a), rxa), ((x, c), rxc), ((a, c), rac)):
        if abs(r) <= POPULATION_TOL:
            raise ZeroCorrelation(f"rho({p},{q}) is zero; ordering undefined")
    sxa, sxc, sac = table.se(x, a), table.se(x, c), table.se(a, c)
    res_c = abs(rxa) - abs(rac) * abs(rxc)
    res_a = abs(rxc) - abs(rac) * abs(rxa)
    se_c = math.sqrt(sxa**2 + (rxc * sac) ** 2 + (rac * sxc) ** 2)
    se_a = math.sqrt(sxc**2 + (rxa * sac) ** 2 + (rac * sxa) ** 2)
    c_ok = abs(res_c) <= t.band(se_c)
    a_ok = abs(res_a) <= t.band(se_a)
    note = ""
    if t.population:
        if c_ok and abs(rxa - rac * rxc) > t.band():
            note = "c_between holds in magnitude but not in sign"
            c_ok = False
        if a_ok and abs(rxc - rac * rxa) > t.band():
            note = "a_between holds in magnitude but not in sign"
            a_ok = False
    if c_ok and a_ok:
        return ChainOrder("neither", res_c, res_a, "both factorizations hold within tolerance")
    if c_ok:
        return ChainOrder("c_between", res_c, res_a, note)
    if a_ok:
        return ChainOrder("a_between", res_c, res_a, note)
    return ChainOrder("neither", res_c, res_a, note or "neither factorization holds")


# -- residual checks -----------------------------------------------------------


def _numeric_se(fn: Callable[[np.ndarray], float], values: np.ndarray, ses: np.ndarray) -> float:
    """Delta-method standard error with central-difference gradients."""
    if not np.any(ses):
        return 0.0
    grad = np.zeros_like(values)
    for i in range(len(values)):
        h = 1e-6
        up, dn = values.copy(), values.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (fn(up) - fn(dn)) / (2 * h)
    return float(math.sqrt(np.sum((grad * ses) ** 2)))


@dataclass(frozen=True)
class LatentVerdict:
    verdict: str  # no_extra_connection | extra_connection | degenerate
    residual: float
    solved_coefficients: Mapping[str, float] = field(default_factory=dict)
    tolerance: float = POPULATION_TOL

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "residual": _jsonable(self.residual),
            "solved_coefficients": dict(self.solved_coefficients),
            "tolerance": self.tolerance,
        }


def _latent_solve(r: np.ndarray) -> tuple[float, float, float] | None:
    r12, r13, r24, r34, r14 = r
    k = r12 * r13
    det = 1.0 - k * k
    if abs(det) < 1e-9:
        return None
    a24 = (r24 - k * r34) / det
    a34 = (r34 - k * r24) / det
    return a24, a34, r14 - (r12 * a24 + r13 * a34)


def latent_check(
    table: PartialCorrelationTable,
    variables: Sequence[str] = ("X1", "X2", "X3", "X4"),
    tol: float | None = None,
) -> LatentVerdict:
    """Test for a hidden X2 - X3 connection in the diamond X2 <- X1 -> X3, X2 -> X4 <- X3.

    Without such a connection the trek rule gives
    ``rho24 = a24 + k a34`` and ``rho34 = k a24 + a34`` with
    ``k = rho12 rho13``; solving these and substituting into
    ``rho14 = rho12 a24 + rho13 a34`` leaves a residual that must vanish.
    """
    x1, x2, x3, x4 = variables
    pairs = [(x1, x2), (x1, x3), (x2, x4), (x3, x4), (x1, x4)]
    r = np.array([table.get(*p) for p in pairs])
    ses = np.array([table.se(*p) for p in pairs])
    t = Tolerance.for_table(table, tol)
    solved = _latent_solve(r)
    if solved is None:
        return LatentVerdict("degenerate", math.inf, {}, t.band())
    a24, a34, resid = solved
    se = _numeric_se(lambda v: _latent_solve(v)[2], r, ses)
    band = t.band(se)
    verdict = "no_extra_connection" if abs(resid) <= band else "extra_connection"
    return LatentVerdict(
        verdict,
        abs(resid),
        {f"a_{x2}{x4}": a24, f"a_{x3}{x4}": a34, f"a_{x1}{x2}": float(r[0]), f"a_{x1}{x3}": float(r[1])},
        band,
    )


@dataclass(frozen=True)
class PartialGraph:
    """Marginal graph as returned by a per-dataset search; may hold undirected edges."""

    nodes: tuple[str, ...]
    directed: Mapping[tuple[str, str], float | None]
    undirected: tuple[tuple[str, str], ...] = ()

    @classmethod
    def from_dag(cls, g: Dag | WeightedDag) -> "PartialGraph":
        if isinstance(g, WeightedDag):
            return cls(g.nodes, dict(g.coeff))
        return cls(g.nodes, {e: None for e in g.edges})


def fit_coefficients(dag: Dag, table: PartialCorrelationTable) -> dict[tuple[str, str], float]:
    """Standardized regression coefficients of each node on its parents."""
    out = {}
    for v in dag.nodes:
        pa = sorted(dag.parents[v])
        if not pa:
            continue
        s = np.array([[1.0 if p == q else table.get(p, q) for q in pa] for p in pa])
        c = np.array([table.get(p, v) for p in pa])
        b = np.linalg.solve(s, c)
        out.update({(p, v): float(bi) for p, bi in zip(pa, b)})
    return out


@dataclass(frozen=True)
class EdgeVerdict:
    decision: str  # keep | remove
    residual: float
    predicted: float
    observed: float
    coefficients: Mapping[str, float]
    edge: tuple[str, str]
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "decision": self.decision,
            "edge": list(self.edge),
            "residual": self.residual,
            "predicted": self.predicted,
            "observed": self.observed,
            "coefficients": dict(self.coefficients),
            "tolerance": self.tolerance,
        }


def _triangle_roles(left: PartialGraph, right: PartialGraph) -> tuple[str, str, str, str]:
    shared = set(left.nodes) & set(right.nodes)
    if len(shared) != 2 or len(left.nodes) != 3 or len(right.nodes) != 3:
        raise ValueError("expected two triangles sharing exactly two nodes")

    def indeg(g: PartialGraph, v: str) -> int:
        return sum(1 for (_, c) in g.directed if c == v)

    src = [v for v in shared if indeg(left, v) == 0 and indeg(right, v) == 0]
    if len(src) != 1:
        raise ValueError("the shared source of both triangles is not identifiable")
    x1 = src[0]
    (x4,) = shared - {x1}
    (x2,) = set(left.nodes) - shared
    (x3,) = set(right.nodes) - shared
    for g, mid in ((left, x2), (right, x3)):
        for e in ((x1, mid), (mid, x4)):
            if e not in g.directed:
                raise ValueError(f"triangle lacks the edge {e[0]} -> {e[1]}")
    return x1, x2, x3, x4


def redundant_edge_check(
    left_triangle: PartialGraph | Dag | WeightedDag,
    right_triangle: PartialGraph | Dag | WeightedDag,
    table: PartialCorrelationTable,
    tol: float | None = None,
) -> EdgeVerdict:
    """Decide whether the direct X1 -> X4 edge of two directed triangles is redundant.

    The triangles share X1 (source) and X4 (sink).  Coefficients come from
    the triangles when they carry them, otherwise they are fitted from the
    table.  The edge is removed iff
    ``|rho14 - (a12 a24 + a13 a34)| <= tolerance`` (inclusive).
    """
    left = left_triangle if isinstance(left_triangle, PartialGraph) else PartialGraph.from_dag(left_triangle)
    right = right_triangle if isinstance(right_triangle, PartialGraph) else PartialGraph.from_dag(right_triangle)
    for g in (left, right):
        if g.undirected:
            u, v = g.undirected[0]
            raise UndirectedEdge(f"marginal graph over {sorted(g.nodes)} has an unoriented edge {u} - {v}")
    x1, x2, x3, x4 = _triangle_roles(left, right)

    def coeffs(g: PartialGraph, mid: str) -> tuple[float, float]:
        a1, a2 = g.directed[(x1, mid)], g.directed[(mid, x4)]
        if a1 is None or a2 is None:
            fitted = fit_coefficients(Dag(g.nodes, g.directed.keys()), table)
            a1, a2 = fitted[(x1, mid)], fitted[(mid, x4)]
        return a1, a2

    a12, a24 = coeffs(left, x2)
    a13, a34 = coeffs(right, x3)
    observed = table.get(x1, x4)
    predicted = a12 * a24 + a13 * a34
    resid = abs(observed - predicted)

    t = Tolerance.for_table(table, tol)
    se = 0.0
    if not t.population:
        # regression form of the coefficients on the two marginals
        keys = [(x1, x2), (x2, x4), (x1, x3), (x3, x4), (x1, x4)]
        r = np.array([table.get(*k) for k in keys])
        ses = np.array([table.se(*k) for k in keys])

        def fn(v):
            r12, r24, r13, r34, r14 = v
            b24 = (r24 - r12 * r14) / (1 - r12 * r12)
            b34 = (r34 - r13 * r14) / (1 - r13 * r13)
            return r14 - (r12 * b24 + r13 * b34)

        se = _numeric_se(fn, r, ses)
    band = t.band(se)
    return EdgeVerdict(
        "remove" if resid <= band else "keep",
        resid,
        predicted,
        observed,
        {f"a_{x1}{x2}": a12, f"a_{x2}{x4}": a24, f"a_{x1}{x3}": a13, f"a_{x3}{x4}": a34},
        (x1, x4),
        band,
    )


def _diamond_treks(g: Dag, x1: str, x2: str, x3: str, x4: str) -> bool:
    """Whether some member has exactly the diamond's adjacencies among the four nodes
    and no other node opens a trek between two of them."""
    from .graph import enumerate_treks

    ref = Dag((x1, x2, x3, x4), [(x1, x2), (x1, x3), (x2, x4), (x3, x4)])
    if g.restricted((x1, x2, x3, x4)).edges != ref.edges:
        return False
    quad = (x1, x2, x3, x4)
    for u, v in itertools.combinations(quad, 2):
        treks = enumerate_treks(g, u, v)
        if any(not t.nodes <= set(quad) for t in treks):
            return False
    return True


def latent_prune(
    candidates: Sequence[Candidate], verdict: LatentVerdict, variables: Sequence[str]
) -> list[Candidate]:
    """Rule out diamond-shaped classes when the residual shows an extra connection (R5)."""
    out = []
    if verdict.verdict != "extra_connection":
        return list(candidates)
    x1, x2, x3, x4 = variables
    for cand in candidates:
        if cand.alive and set(variables) <= set(cand.graph.nodes) and any(
            _diamond_treks(m, x1, x2, x3, x4) for m in cand.members or (cand.graph,)
        ):
            cand = cand.append(
                [
                    LedgerEntry(
                        R5,
                        f"R5:{x1}{x2}{x3}{x4}",
                        f"rho({x1},{x4}) = rho({x1},{x2}) a_{x2}{x4} + rho({x1},{x3}) a_{x3}{x4}",
                        "violated",
                        {"residual": verdict.residual, "tolerance": verdict.tolerance},
                    )
                ]
            )
        out.append(cand)
    return out


def redundant_edge_prune(candidates: Sequence[Candidate], verdict: EdgeVerdict) -> list[Candidate]:
    """Rule out classes with the X1 - X4 adjacency once it is shown redundant (R6)."""
    if verdict.decision != "remove":
        return list(candidates)
    u, v = verdict.edge
    out = []
    for cand in candidates:
        if cand.alive and u in cand.graph.nodes and v in cand.graph.nodes and cand.graph.adjacent(u, v):
            cand = cand.append(
                [
                    LedgerEntry(
                        R6,
                        f"R6:{u}-{v}",
                        f"no trek between {u} and {v} beyond the two mediated ones",
                        "violated",
                        {"residual": verdict.residual, "tolerance": verdict.tolerance},
                    )
                ]
            )
        out.append(cand)
    return out


# -- pipeline ------------------------------------------------------------------


@dataclass(frozen=True)
class PruneOptions:
    alpha: float = 0.01
    tol: float | None = None
    population: bool | None = None
    faithfulness: bool = True
    forbidden_edges: tuple[tuple[str, str], ...] = ()
    latent: tuple[str, str, str, str] | None = None
    triangles: tuple[object, object] | None = None
    workers: int | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class PruneReport:
    candidates: tuple[Candidate, ...]
    table: PartialCorrelationTable
    catalog: CiCatalog
    population: bool
    latent: LatentVerdict | None = None
    edge: EdgeVerdict | None = None

    @property
    def alive(self) -> list[Candidate]:
        return [c for c in self.candidates if c.alive]

    @property
    def ruled_out(self) -> list[Candidate]:
        return [c for c in self.candidates if not c.alive]

    def deferred(self) -> list[LedgerEntry]:
        """Deferred constraints of the surviving classes, one per constraint id."""
        seen: dict[str, LedgerEntry] = {}
        for c in self.alive:
            for e in c.deferred():
                seen.setdefault(e.constraint_id, e)
        return [seen[k] for k in sorted(seen)]

    def to_dict(self) -> dict:
        return {
            "mode": "population" if self.population else "sample",
            "variables": sorted(self.table.union_variables),
            "n_statements": len(self.catalog),
            "n_classes": len(self.candidates),
            "n_alive": len(self.alive),
            "candidates": [c.to_dict() for c in self.candidates],
            "deferred": [e.to_dict() for e in self.deferred()],
            "latent_check": self.latent.to_dict() if self.latent else None,
            "edge_check": self.edge.to_dict() if self.edge else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"mode: {'population' if self.population else 'sample'}",
            f"variables: {', '.join(sorted(self.table.union_variables))}",
            f"CI statements: {len(self.catalog)}",
            f"equivalence classes: {len(self.candidates)} ({len(self.alive)} alive, {len(self.ruled_out)} ruled out)",
            "",
        ]
        for i, c in enumerate(self.candidates, start=1):
            edges = ", ".join(f"{p}->{q}" for p, q in sorted(c.graph.edges)) or "(no edges)"
            lines.append(f"[{i}] {c.status.upper():9s} {edges}  ({len(c.members)} member DAGs)")
            for e in c.ledger:
                if e.violated:
                    ev = ", ".join(f"{k}={_fmt(v)}" for k, v in e.evidence.items())
                    lines.append(f"      {e.rule}: {e.description}  [{ev}]")
        deferred = self.deferred()
        if deferred:
            lines.append("")
            lines.append(f"deferred constraints ({len(deferred)}):")
            for e in deferred:
                miss = ", ".join(f"({a},{b})" for a, b in e.missing)
                lines.append(f"  {e.rule}: {e.description}  missing {miss}")
        if self.latent:
            lines.append("")
            lines.append(f"latent check: {self.latent.verdict} (residual {_fmt(self.latent.residual)})")
        if self.edge:
            lines.append("")
            lines.append(
                f"edge check {self.edge.edge[0]}-{self.edge.edge[1]}: {self.edge.decision} "
                f"(residual {_fmt(self.edge.residual)})"
            )
        return "\n".join(lines) + "\n"


def prune_pipeline(marginals: Sequence[MarginalDataset], options: PruneOptions = PruneOptions()) -> PruneReport:
    """CI extraction, enumeration, R3, R4 and the optional R5 / R6 stages."""
    if not marginals:
        raise ValueError("prune_pipeline needs at least one marginal")
    table = build_correlation_table(marginals, population=options.population)
    catalog = extract_ci(marginals, options.alpha, population=options.population)
    cands = enumerate_candidates(
        table.union_variables,
        catalog,
        options.forbidden_edges,
        faithfulness=options.faithfulness,
        workers=options.workers,
    )
    cands = mediation_inequality_prune(cands, table, options.tol)
    cands = chain_order_prune(cands, table, options.tol)
    latent = edge = None
    if options.latent is not None:
        latent = latent_check(table, options.latent, options.tol)
        cands = latent_prune(cands, latent, options.latent)
    if options.triangles is not None:
        edge = redundant_edge_check(*options.triangles, table, options.tol)
        cands = redundant_edge_prune(cands, edge)
    cands = sorted(cands, key=lambda c: c.key)
    return PruneReport(tuple(cands), table, catalog, table.population, latent, edge)


def generating_class_alive(report: PruneReport, dag: Dag) -> bool | None:
    """True/False if the DAG's class was enumerated and is alive/ruled out; None if absent."""
    key = class_key(dag.restricted(report.table.union_variables))
    for c in report.candidates:
        if class_key(c.graph) == key:
            return c.alive
    return None


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating,)):
        return float(v)
    return v
