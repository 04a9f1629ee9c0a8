"""Measurement planning from hypothesized treks.

Magnitude orderings such as ``|rho_XA| > |rho_XC| > |rho_XF|`` suggest a
single trek X - A - C - F.  Each hypothesis comes with tests that need
correlations not yet measured; a proposal is a variable set whose joint
measurement would make some of those tests evaluable.

All functions here are pure evaluations over a ``PartialCorrelationTable``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .errors import UnknownPair, ZeroCorrelation
from .marginals import PartialCorrelationTable
from .semsim import POPULATION_TOL
from .unify import LedgerEntry, Tolerance


@dataclass(frozen=True)
class TrekHypothesis:
    endpoints: tuple[str, str]
    interior: tuple[str, ...]
    evidence: tuple[tuple[str, float], ...] = ()

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.endpoints[0], *self.interior, self.endpoints[1])

    @property
    def length(self) -> int:
        return len(self.interior) + 1

    def __str__(self) -> str:
        return "-".join(self.nodes)

    def to_dict(self) -> dict:
        return {
            "trek": list(self.nodes),
            "endpoints": list(self.endpoints),
            "interior": list(self.interior),
            "evidence": {f"|rho({self.endpoints[0]},{v})|": r for v, r in self.evidence},
        }


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest class

    name: str
    passed: bool
    residuals: dict[str, float] = field(default_factory=dict)
    tolerance: float = POPULATION_TOL
    note: str = ""
    values: dict[str, float] = field(default_factory=dict)

    @property
    def max_residual(self) -> float:
        return max((abs(v) for v in self.residuals.values()), default=0.0)

    def __bool__(self) -> bool:
        return self.passed

    def to_dict(self) -> dict:
        return {
            "test": self.name,
            "passed": self.passed,
            "residuals": self.residuals,
            "tolerance": self.tolerance,
            "note": self.note,
            "values": self.values,
        }


@dataclass(frozen=True)
class PlannedTest:
    """A test waiting on data; ``run`` evaluates it once every pair is known."""

    id: str
    pairs: tuple[tuple[str, str], ...]
    trek_length: int
    run: Callable[[PartialCorrelationTable, float | None], TestResult] | None = field(default=None, compare=False, repr=False)

    def missing(self, table: PartialCorrelationTable) -> tuple[tuple[str, str], ...]:
        return tuple(p for p in self.pairs if not table.is_known(*p))


@dataclass(frozen=True)
class MeasurementProposal:
    variables: tuple[str, ...]
    enabled_tests: tuple[str, ...]
    longest_trek: int

    @property
    def score(self) -> int:
        return len(self.enabled_tests)

    def to_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "score": self.score,
            "longest_trek": self.longest_trek,
            "enabled_tests": list(self.enabled_tests),
        }


def _sorted_pair(u: str, v: str) -> tuple[str, str]:
    return tuple(sorted((u, v)))


def _need(table: PartialCorrelationTable, *pairs: tuple[str, str]) -> None:
    for p in pairs:
        if not table.is_known(*p):
            raise UnknownPair(*p)


# -- hypotheses ----------------------------------------------------------------


def default_anchors(table: PartialCorrelationTable) -> tuple[str, ...]:
    """Variables whose correlation with every other variable is known."""
    vs = sorted(table.union_variables)
    return tuple(u for u in vs if all(table.is_known(u, v) for v in vs if v != u))


def hypothesize_treks(
    table: PartialCorrelationTable, anchors: Iterable[str] | None = None, tol: float | None = None
) -> list[TrekHypothesis]:
    """Chains of strictly decreasing ``|rho_U.|`` from each anchor U.

    Correlations within tolerance of each other are tied; a chain takes one
    node per tie group, so ties branch into several hypotheses.  Only maximal
    chains with at least one interior node are returned.
    """
    t = Tolerance.for_table(table, tol)
    anchors = tuple(sorted(anchors)) if anchors is not None else default_anchors(table)
    out = []
    for u in anchors:
        others = [v for v in sorted(table.union_variables) if v != u and v not in anchors and table.is_known(u, v)]
        mags = sorted(((table.abs(u, v), v) for v in others), key=lambda p: (-p[0], p[1]))
        mags = [(r, v) for r, v in mags if r > t.band(table.se(u, v))]
        groups: list[list[tuple[float, str]]] = []
        for r, v in mags:
            if groups and groups[-1][0][0] - r <= t.band(math.hypot(table.se(u, v), table.se(u, groups[-1][0][1]))):
                groups[-1].append((r, v))
            else:
                groups.append([(r, v)])
        if len(groups) < 2:
            continue
        for combo in itertools.product(*groups):
            *interior, end = combo
            out.append(
                TrekHypothesis((u, end[1]), tuple(v for _, v in interior), tuple((v, r) for r, v in combo))
            )
    return out


# -- tests ---------------------------------------------------------------------


def chain_membership_test(
    table: PartialCorrelationTable, trek: TrekHypothesis | Sequence[str], tol: float | None = None
) -> TestResult:
    """Whether the interior nodes lie on the unique trek between the endpoints.

    For every known pair (p, q) of chain nodes after the anchor U, with p
    before q, the trek rule requires ``|rho_Uq| = |rho_Up| |rho_pq|``.  The
    pair (last interior, endpoint) must be known; pairs between interior
    nodes are used when available.  With the last pair alone this is
    ``|rho_XF| = |rho_XC| |rho_CF|``, the ratio form obtained by dividing the
    two product equations.
    """
    nodes = tuple(trek.nodes) if isinstance(trek, TrekHypothesis) else tuple(trek)
    name = f"chain:{'-'.join(nodes)}"
    t = Tolerance.for_table(table, tol)
    u, rest = nodes[0], nodes[1:]
    if len(rest) < 2:
        return TestResult(name, True, {}, t.band(), "no interior nodes; passes vacuously")
    _need(table, *(_sorted_pair(u, v) for v in rest), _sorted_pair(rest[-2], rest[-1]))
    for v in rest:
        if table.abs(u, v) <= POPULATION_TOL:
            raise ZeroCorrelation(f"rho({u},{v}) is zero")
    residuals: dict[str, float] = {}
    passed = True
    note = ""
    for i, j in itertools.combinations(range(len(rest)), 2):
        p, q = rest[i], rest[j]
        if not table.is_known(p, q):
            continue
        ruq, rup, rpq = table.get(u, q), table.get(u, p), table.get(p, q)
        res = abs(ruq) - abs(rup) * abs(rpq)
        se = math.sqrt(table.se(u, q) ** 2 + (rpq * table.se(u, p)) ** 2 + (rup * table.se(p, q)) ** 2)
        band = t.band(se)
        residuals[f"|rho({u},{q})|-|rho({u},{p})||rho({p},{q})|"] = res
        if abs(res) > band:
            passed = False
        elif t.population and abs(ruq - rup * rpq) > band:
            passed = False
            note = f"sign mismatch on rho({u},{q})"
    return TestResult(name, passed, residuals, t.band(), note)


def two_trek_decomposition_test(
    table: PartialCorrelationTable, b: str, f: str, via: tuple[str, str] = ("X", "Y"), tol: float | None = None
) -> TestResult:
    """``|rho_bf| = |rho_xb||rho_xf| + |rho_yb||rho_yf|``: one trek through each of x and y."""
    x, y = via
    _need(table, *(_sorted_pair(*p) for p in ((x, b), (x, f), (y, b), (y, f), (b, f))))
    t = Tolerance.for_table(table, tol)
    rbf, rxb, rxf, ryb, ryf = (table.get(*p) for p in ((b, f), (x, b), (x, f), (y, b), (y, f)))
    res = abs(rbf) - (abs(rxb) * abs(rxf) + abs(ryb) * abs(ryf))
    se = math.sqrt(
        table.se(b, f) ** 2
        + (rxf * table.se(x, b)) ** 2
        + (rxb * table.se(x, f)) ** 2
        + (ryf * table.se(y, b)) ** 2
        + (ryb * table.se(y, f)) ** 2
    )
    band = t.band(se)
    passed = abs(res) <= band
    note = ""
    if passed and t.population and abs(rbf - (rxb * rxf + ryb * ryf)) > band:
        passed, note = False, "magnitudes agree but signs do not"
    return TestResult(f"two-trek:{b}-{f}|{x},{y}", passed, {"residual": res}, band, note)


def second_trek_membership_test(
    table: PartialCorrelationTable,
    e: str,
    b: str = "B",
    f: str = "F",
    via: tuple[str, str] = ("X", "Y"),
    tol: float | None = None,
) -> TestResult:
    """Whether ``e`` sits on the trek from b to f that runs through y.

    Removing the x-trek from ``|rho_bf|`` leaves ``|rho_by||rho_yf|``; if e
    lies between y and f this equals ``|rho_by||rho_ye||rho_ef|``, so

        (|rho_bf| - |rho_xb||rho_xf|) / (|rho_by||rho_ye|) = |rho_ef|.
    """
    x, y = via
    name = f"second-trek:{e}|{b}-{f}"
    _need(table, *(_sorted_pair(*p) for p in ((b, f), (x, b), (x, f), (b, y), (y, e), (f, e))))
    t = Tolerance.for_table(table, tol)
    rby, rye = table.get(b, y), table.get(y, e)
    if abs(rby) <= POPULATION_TOL or abs(rye) <= POPULATION_TOL:
        raise ZeroCorrelation(f"rho({b},{y}) or rho({y},{e}) is zero")
    numer = table.abs(b, f) - table.abs(x, b) * table.abs(x, f)
    ref = table.abs(f, e)
    if numer <= t.band():
        return TestResult(
            name, False, {}, t.band(),
            "no trek remains after removing the one through " + x,
            {"numerator": numer},
        )
    lhs = numer / (abs(rby) * abs(rye))
    res = lhs - ref
    se = 0.0
    if not t.population:
        se = math.sqrt(
            sum(table.se(*p) ** 2 for p in ((b, f), (x, b), (x, f), (b, y), (y, e), (f, e)))
        ) / (abs(rby) * abs(rye))
    band = t.band(se)
    return TestResult(name, abs(res) <= band, {"residual": res}, band, "", {"lhs": lhs, f"|rho({e},{f})|": ref})


# -- proposals -----------------------------------------------------------------


def planned_tests(
    hypotheses: Sequence[TrekHypothesis], table: PartialCorrelationTable, anchors: Iterable[str] | None = None
) -> list[PlannedTest]:
    """Tests suggested by the hypotheses, whether or not they are evaluable yet."""
    anchors = tuple(sorted(anchors)) if anchors is not None else default_anchors(table)
    tests: dict[str, PlannedTest] = {}

    def add(t: PlannedTest) -> None:
        tests.setdefault(t.id, t)

    for h in hypotheses:
        nodes = h.nodes
        req = [_sorted_pair(nodes[0], v) for v in nodes[1:]] + [_sorted_pair(nodes[-2], nodes[-1])]
        add(PlannedTest(f"chain:{h}", tuple(dict.fromkeys(req)), h.length, lambda tb, tol, h=h: chain_membership_test(tb, h, tol)))

    for x, y in itertools.combinations(anchors, 2):
        both = [
            v for v in sorted(table.union_variables)
            if v not in anchors
            and table.is_known(x, v) and table.is_known(y, v)
            and table.abs(x, v) > POPULATION_TOL and table.abs(y, v) > POPULATION_TOL
        ]
        for b, f in itertools.combinations(both, 2):
            # trek length through the longer anchor chain ending at either node
            span = 2 + max(
                (h.length for h in hypotheses if h.endpoints[0] in (x, y) and h.endpoints[1] in (b, f)),
                default=1,
            )
            pairs = tuple(_sorted_pair(*p) for p in ((x, b), (x, f), (y, b), (y, f), (b, f)))
            add(PlannedTest(
                f"two-trek:{b}-{f}|{x},{y}", pairs, span,
                lambda tb, tol, b=b, f=f, x=x, y=y: two_trek_decomposition_test(tb, b, f, (x, y), tol),
            ))
            for h in hypotheses:
                if h.endpoints[1] not in (b, f) or h.endpoints[0] not in (x, y):
                    continue
                end = h.endpoints[1]
                start = b if end == f else f
                side, other = h.endpoints[0], (y if h.endpoints[0] == x else x)
                for e in h.interior:
                    if e == start:
                        continue
                    pairs2 = tuple(dict.fromkeys(
                        _sorted_pair(*p)
                        for p in ((start, end), (other, start), (other, end), (start, side), (side, e), (end, e))
                    ))
                    add(PlannedTest(
                        f"second-trek:{e}|{start}-{end}", pairs2, span,
                        lambda tb, tol, e=e, s=start, n=end, o=other, d=side: second_trek_membership_test(tb, e, s, n, (o, d), tol),
                    ))
    return sorted(tests.values(), key=lambda t: t.id)


def propose_measurements(
    hypotheses: Sequence[TrekHypothesis],
    table: PartialCorrelationTable,
    budget: int = 3,
    *,
    anchors: Iterable[str] | None = None,
    deferred: Iterable[LedgerEntry] = (),
) -> list[MeasurementProposal]:
    """Rank variable sets of size 2..budget by how many pending tests they make evaluable.

    ``deferred`` constraints from the unify engine count as tests too.  Ties
    go to the set covering the longest hypothesized trek, then to smaller
    sets, then to alphabetical order.
    """
    if budget < 2:
        raise ValueError("budget must be at least 2")
    pending = [(t.id, set(t.missing(table)), t.trek_length) for t in planned_tests(hypotheses, table, anchors)]
    for e in deferred:
        if e.missing:
            pending.append((e.constraint_id, {_sorted_pair(*p) for p in e.missing}, 1))
    pending = [p for p in pending if p[1]]
    if not pending:
        return []
    out = []
    for k in range(2, budget + 1):
        for combo in itertools.combinations(sorted(table.union_variables), k):
            if table.jointly_measured(combo):
                continue
            gained = {_sorted_pair(*p) for p in itertools.combinations(combo, 2)}
            enabled = [(tid, length) for tid, miss, length in pending if miss <= gained]
            if enabled:
                ids = tuple(dict.fromkeys(tid for tid, _ in enabled))
                out.append(MeasurementProposal(combo, ids, max(length for _, length in enabled)))
    out.sort(key=lambda p: (-p.score, -p.longest_trek, len(p.variables), p.variables))
    return out


def evaluate_tests(
    tests: Iterable[PlannedTest], table: PartialCorrelationTable, tol: float | None = None
) -> list[TestResult]:
    """Run every test whose pairs are all known."""
    return [t.run(table, tol) for t in tests if t.run is not None and not t.missing(table)]


@dataclass(frozen=True)
class PlanReport:
    hypotheses: tuple[TrekHypothesis, ...]
    proposals: tuple[MeasurementProposal, ...]
    results: tuple[TestResult, ...]
    budget: int

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "hypotheses": [h.to_dict() for h in self.hypotheses],
            "proposals": [p.to_dict() for p in self.proposals],
            "evaluated_tests": [r.to_dict() for r in self.results],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self, top: int = 10) -> str:
        lines = [f"hypothesized treks ({len(self.hypotheses)}):"]
        for h in self.hypotheses:
            ev = " > ".join(f"{r:.4g}" for _, r in h.evidence)
            lines.append(f"  {h}   |rho| {ev}")
        lines.append("")
        lines.append(f"proposals (budget {self.budget}, showing {min(top, len(self.proposals))} of {len(self.proposals)}):")
        for i, p in enumerate(self.proposals[:top], start=1):
            lines.append(f"  {i}. {{{', '.join(p.variables)}}}  score {p.score}  longest trek {p.longest_trek}")
            for tid in p.enabled_tests:
                lines.append(f"       enables {tid}")
        if self.results:
            lines.append("")
            lines.append("evaluable tests:")
            for r in self.results:
                status = "pass" if r.passed else "FAIL"
                extra = f"  ({r.note})" if r.note else ""
                lines.append(f"  {status}  {r.name}  max residual {r.max_residual:.3g}{extra}")
        return "\n".join(lines) + "\n"


def plan(
    table: PartialCorrelationTable,
    budget: int = 3,
    anchors: Iterable[str] | None = None,
    tol: float | None = None,
    deferred: Iterable[LedgerEntry] = (),
) -> PlanReport:
    anchors = tuple(sorted(anchors)) if anchors is not None else default_anchors(table)
    hyps = hypothesize_treks(table, anchors, tol)
    props = propose_measurements(hyps, table, budget, anchors=anchors, deferred=deferred)
    results = evaluate_tests(planned_tests(hyps, table, anchors), table, tol)
    return PlanReport(tuple(hyps), tuple(props), tuple(results), budget)
