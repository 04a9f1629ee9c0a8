"""Marginal datasets, manifest loading, CI extraction and the pairwise table."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.stats import norm

from .errors import (
    ContradictoryStatements,
    DuplicateId,
    InconsistentOverlap,
    ParseError,
    UnknownPair,
    VariableMismatch,
)
from .graph import CorrelationMatrix
from .semsim import (
    POPULATION,
    POPULATION_TOL,
    CiStatement,
    NoiseSpec,
    SampleTable,
    ci_test,
    empirical_correlation,
    fisher_z,
    partial_correlation,
    pooled_ci_test,
    sample,
)

Pair = frozenset  # frozenset of two variable names


def pair(x: str, y: str) -> frozenset[str]:
    if x == y:
        raise ValueError("a pair needs two distinct variables")
    return frozenset((x, y))


@dataclass(frozen=True, eq=False)
class MarginalDataset:
    """One dataset over a subset of the variables.

    ``payload`` is either a :class:`SampleTable` or a correlation matrix with
    a sample size ``n`` (``POPULATION`` for exact correlations).
    """

    id: str
    variables: frozenset[str]
    samples: SampleTable | None = None
    corr_matrix: CorrelationMatrix | None = None
    n: float = POPULATION

    def __post_init__(self):
        object.__setattr__(self, "variables", frozenset(self.variables))
        if (self.samples is None) == (self.corr_matrix is None):
            raise ValueError("give exactly one of samples or corr_matrix")
        declared = set(self.payload_variables)
        if declared != set(self.variables):
            raise VariableMismatch(
                f"marginal {self.id!r}: payload has {sorted(declared)}, declared {sorted(self.variables)}"
            )
        if self.samples is not None:
            object.__setattr__(self, "n", float(self.samples.n))

    @classmethod
    def from_samples(cls, id: str, table: SampleTable) -> "MarginalDataset":
        return cls(id, frozenset(table.variables), samples=table)

    @classmethod
    def from_corr(cls, id: str, corr: CorrelationMatrix, n: float = POPULATION) -> "MarginalDataset":
        return cls(id, frozenset(corr.variables), corr_matrix=corr, n=n)

    @property
    def payload_variables(self) -> tuple[str, ...]:
        if self.samples is not None:
            return self.samples.variables
        return self.corr_matrix.variables

    @property
    def kind(self) -> str:
        return "samples" if self.samples is not None else "corr"

    @property
    def population(self) -> bool:
        return math.isinf(self.n)

    @property
    def corr(self) -> CorrelationMatrix:
        if self.corr_matrix is not None:
            return self.corr_matrix
        # cache on the frozen instance
        cached = self.__dict__.get("_corr")
        if cached is None:
            cached = empirical_correlation(self.samples)
            object.__setattr__(self, "_corr", cached)
        return cached

    def ordered_variables(self) -> list[str]:
        return sorted(self.variables)


# -- files -------------------------------------------------------------------


def _read_csv(path: Path) -> tuple[list[str], list[list[str]], list[int]]:
    header = None
    rows: list[list[str]] = []
    lines: list[int] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            row = [c.strip() for c in row]
            if header is None:
                header = row
                continue
            rows.append(row)
            lines.append(lineno)
    if header is None:
        raise ParseError(str(path), 0, "empty file")
    return header, rows, lines


def _floats(path: Path, row: list[str], lineno: int, width: int) -> list[float]:
    if len(row) != width:
        raise ParseError(str(path), lineno, f"expected {width} fields, got {len(row)}")
    try:
        return [float(c) for c in row]
    except ValueError as exc:
        raise ParseError(str(path), lineno, f"non-numeric field ({exc})") from None


def read_samples(path: str | Path) -> SampleTable:
    """CSV with a header row of variable names, one sample per line."""
    path = Path(path)
    header, rows, lines = _read_csv(path)
    data = [_floats(path, r, ln, len(header)) for r, ln in zip(rows, lines)]
    if not data:
        raise ParseError(str(path), 1, "no sample rows")
    arr = np.array(data)
    if not np.all(np.isfinite(arr)):
        raise ParseError(str(path), 0, "missing or non-finite values")
    return SampleTable(tuple(header), arr)


def read_corr(path: str | Path) -> CorrelationMatrix:
    """CSV with a header row of variable names followed by the square matrix."""
    path = Path(path)
    header, rows, lines = _read_csv(path)
    if len(rows) != len(header):
        raise ParseError(str(path), lines[-1] if lines else 1, f"expected {len(header)} matrix rows, got {len(rows)}")
    data = [_floats(path, r, ln, len(header)) for r, ln in zip(rows, lines)]
    try:
        return CorrelationMatrix(header, data, atol=1e-9)
    except ValueError as exc:
        raise ParseError(str(path), lines[0], str(exc)) from None


def write_samples(table: SampleTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(table.variables)
        for row in table.rows:
            w.writerow([repr(float(v)) for v in row])


def write_corr(corr: CorrelationMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(corr.variables)
        for row in corr.values:
            w.writerow([repr(float(v)) for v in row])


def load_marginals(manifest: str | Path) -> list[MarginalDataset]:
    """Read a manifest of ``id <tab> samples|corr <tab> path <tab> [n]`` lines.

    Relative paths resolve against the manifest's directory.  For ``corr``
    payloads ``n`` is required; ``inf`` marks population correlations.
    """
    manifest = Path(manifest)
    out: list[MarginalDataset] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split("\t")]
        if len(fields) not in (3, 4):
            raise ParseError(str(manifest), lineno, "expected 'id<TAB>kind<TAB>path[<TAB>n]'")
        mid, kind, rel = fields[:3]
        if mid in seen:
            raise DuplicateId(f"{manifest}:{lineno}: id {mid!r} already used on line {seen[mid]}")
        seen[mid] = lineno
        path = Path(rel)
        if not path.is_absolute():
            path = manifest.parent / path
        if not path.exists():
            raise ParseError(str(manifest), lineno, f"no such file {rel!r}")
        if kind == "samples":
            ds = MarginalDataset.from_samples(mid, read_samples(path))
        elif kind == "corr":
            if len(fields) != 4:
                raise ParseError(str(manifest), lineno, "corr payloads need a sample size (or 'inf')")
            try:
                n = float(fields[3])
            except ValueError:
                raise ParseError(str(manifest), lineno, f"bad sample size {fields[3]!r}") from None
            if not n > 3:
                raise ParseError(str(manifest), lineno, "sample size must exceed 3")
            ds = MarginalDataset.from_corr(mid, read_corr(path), n)
        else:
            raise ParseError(str(manifest), lineno, f"unknown kind {kind!r}")
        out.append(ds)
    return out


def write_manifest(marginals: Sequence[MarginalDataset], directory: str | Path, name: str = "manifest.tsv") -> Path:
    """Write each marginal's payload next to a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for m in marginals:
        if m.kind == "samples":
            fname = f"{m.id}.samples.csv"
            write_samples(m.samples, directory / fname)
            lines.append(f"{m.id}\tsamples\t{fname}")
        else:
            fname = f"{m.id}.corr.csv"
            write_corr(m.corr_matrix, directory / fname)
            lines.append(f"{m.id}\tcorr\t{fname}\t{m.n}")
    path = directory / name
    path.write_text("\n".join(lines) + "\n")
    return path


# -- CI catalog --------------------------------------------------------------


@dataclass(frozen=True)
class CiCatalog:
    statements: tuple[CiStatement, ...]
    exhaustive: dict[str, bool] = field(default_factory=dict)

    def __iter__(self) -> Iterator[CiStatement]:
        return iter(self.statements)

    def __len__(self) -> int:
        return len(self.statements)

    @property
    def variables(self) -> frozenset[str]:
        out: set[str] = set()
        for s in self.statements:
            out |= {s.x, s.y} | s.given
        return frozenset(out)

    def independences(self) -> list[CiStatement]:
        return [s for s in self.statements if s.independent]

    def lookup(self, x: str, y: str, given: Iterable[str] = ()) -> CiStatement | None:
        key = (*sorted((x, y)), frozenset(given))
        for s in self.statements:
            if s.key == key:
                return s
        return None

    def signature(self) -> frozenset:
        """Order-free summary used for caching enumeration results."""
        return frozenset((s.x, s.y, s.given, s.independent) for s in self.statements)


def _subsets(items: Sequence[str]) -> Iterator[tuple[str, ...]]:
    for k in range(len(items) + 1):
        yield from itertools.combinations(items, k)


def extract_ci(
    marginals: Sequence[MarginalDataset],
    alpha: float = 0.01,
    *,
    population: bool | None = None,
    tol: float = POPULATION_TOL,
) -> CiCatalog:
    """Test every pair against every conditioning subset inside each marginal.

    A statement that several marginals can test (same pair, same
    conditioning set) becomes one statement: in sample mode the Fisher-z
    transforms are pooled by inverse variance, in population mode the
    verdicts must agree.

    ``population=True`` treats every payload as exact correlations.
    """
    groups: dict[tuple, list[tuple[str, float, float]]] = {}
    order: list[tuple] = []
    for m in marginals:
        n = POPULATION if (population or m.population) else m.n
        vs = m.ordered_variables()
        for x, y in itertools.combinations(vs, 2):
            rest = [v for v in vs if v not in (x, y)]
            for given in _subsets(rest):
                key = (x, y, frozenset(given))
                r = partial_correlation(m.corr, x, y, given)
                if key not in groups:
                    groups[key] = []
                    order.append(key)
                groups[key].append((m.id, r, n))

    statements = []
    for key in order:
        x, y, given = key
        entries = groups[key]
        source = "+".join(e[0] for e in entries)
        if any(math.isinf(e[2]) for e in entries):
            verdicts = {abs(e[1]) <= tol for e in entries}
            if len(verdicts) > 1:
                raise ContradictoryStatements(
                    f"marginals {source} disagree on {x} _||_ {y} | {sorted(given)}"
                )
            statements.append(CiStatement(x, y, given, verdicts.pop(), 1.0, source))
        elif len(entries) == 1:
            mid, r, n = entries[0]
            m = next(mm for mm in marginals if mm.id == mid)
            statements.append(ci_test(m.corr, n, x, y, given, alpha, source=mid))
        else:
            statements.append(
                pooled_ci_test([e[1] for e in entries], [e[2] for e in entries], x, y, given, alpha, source)
            )
    return CiCatalog(tuple(statements), {m.id: True for m in marginals})


# -- pairwise correlation table ----------------------------------------------


@dataclass(frozen=True)
class PartialCorrelationTable:
    """Reconciled correlations of every co-measured pair.

    Pairs never measured together are absent: :meth:`get` raises
    :class:`UnknownPair` rather than returning 0.
    """

    known: dict[frozenset[str], tuple[float, float]]
    union_variables: frozenset[str]
    measured_sets: tuple[frozenset[str], ...] = ()

    def is_known(self, x: str, y: str) -> bool:
        return pair(x, y) in self.known

    def get(self, x: str, y: str) -> float:
        try:
            return self.known[pair(x, y)][0]
        except KeyError:
            raise UnknownPair(x, y) from None

    def abs(self, x: str, y: str) -> float:
        return abs(self.get(x, y))

    def n(self, x: str, y: str) -> float:
        try:
            return self.known[pair(x, y)][1]
        except KeyError:
            raise UnknownPair(x, y) from None

    def se(self, x: str, y: str) -> float:
        """Delta-method standard error of the reconciled value (0 in population mode)."""
        r, n = self.known[pair(x, y)] if self.is_known(x, y) else (None, None)
        if r is None:
            raise UnknownPair(x, y)
        if math.isinf(n):
            return 0.0
        return (1.0 - r * r) / math.sqrt(max(n - 3.0, 1.0))

    @property
    def population(self) -> bool:
        return all(math.isinf(n) for _, n in self.known.values())

    def jointly_measured(self, variables: Iterable[str]) -> bool:
        vs = set(variables)
        return any(vs <= m for m in self.measured_sets)

    def pairs(self) -> list[tuple[str, str]]:
        return sorted(tuple(sorted(p)) for p in self.known)

    def with_marginal(self, marginal: MarginalDataset, *, population: bool | None = None) -> "PartialCorrelationTable":
        return _merge(self, [marginal], population)


def _merge(
    base: PartialCorrelationTable | None, marginals: Sequence[MarginalDataset], population: bool | None
) -> PartialCorrelationTable:
    contributions: dict[frozenset[str], list[tuple[str, float, float]]] = {}
    if base is not None:
        for p, (r, n) in base.known.items():
            contributions[p] = [("<table>", r, n)]
    union = set(base.union_variables) if base is not None else set()
    measured = list(base.measured_sets) if base is not None else []
    for m in marginals:
        n = POPULATION if (population or m.population) else m.n
        union |= m.variables
        measured.append(frozenset(m.variables))
        for x, y in itertools.combinations(m.ordered_variables(), 2):
            contributions.setdefault(pair(x, y), []).append((m.id, m.corr[x, y], n))

    crit = norm.isf(0.005)
    known = {}
    for p, entries in contributions.items():
        if len(entries) == 1:
            known[p] = entries[0][1:]
            continue
        exact = [e for e in entries if math.isinf(e[2])]
        for (ia, ra, na), (ib, rb, nb) in itertools.combinations(entries, 2):
            if math.isinf(na) and math.isinf(nb):
                bad = abs(ra - rb) > POPULATION_TOL
            else:
                # the two 99% intervals (Fisher z scale) must overlap
                radius = crit * (
                    (0.0 if math.isinf(na) else 1.0 / math.sqrt(na - 3))
                    + (0.0 if math.isinf(nb) else 1.0 / math.sqrt(nb - 3))
                )
                bad = abs(fisher_z(ra) - fisher_z(rb)) > radius
            if bad:
                a, b = sorted(p)
                raise InconsistentOverlap(f"({a}, {b}): {ia} gives {ra:.6g}, {ib} gives {rb:.6g}")
        if exact:
            known[p] = (exact[0][1], POPULATION)
        else:
            w = [e[2] - 3 for e in entries]
            z = sum(wi * fisher_z(e[1]) for wi, e in zip(w, entries)) / sum(w)
            known[p] = (math.tanh(z), float(sum(e[2] for e in entries)))
    return PartialCorrelationTable(known, frozenset(union), tuple(measured))


def build_correlation_table(
    marginals: Sequence[MarginalDataset], *, population: bool | None = None
) -> PartialCorrelationTable:
    """Map every co-measured pair to its reconciled correlation.

    Overlapping estimates are combined as an inverse-variance weighted mean
    of Fisher-z transforms; the effective sample size is the sum.  Raises
    :class:`InconsistentOverlap` when two estimates differ by more than the
    combined 99% confidence radius.
    """
    if not marginals:
        raise ValueError("need at least one marginal")
    return _merge(None, marginals, population)


def population_marginals(corr: CorrelationMatrix, sets: Sequence[Iterable[str]], prefix: str = "m") -> list[MarginalDataset]:
    """Marginals carrying exact correlations restricted from ``corr``."""
    out = []
    for i, vs in enumerate(sets, start=1):
        keep = [v for v in corr.variables if v in set(vs)]
        out.append(MarginalDataset.from_corr(f"{prefix}{i}", corr.restrict(keep), POPULATION))
    return out


def simulate_marginals(
    wdag,
    sets: Sequence[Iterable[str]],
    n: int,
    seed: int = 0,
    noise: NoiseSpec = NoiseSpec(),
    prefix: str = "m",
) -> list[MarginalDataset]:
    """Independent sample tables, one per variable set, each drawn from the full model.

    Per-marginal seeds are spawned from ``seed`` so results are reproducible.
    """
    seeds = np.random.SeedSequence(seed).generate_state(len(sets))
    out = []
    for i, (vs, s) in enumerate(zip(sets, seeds), start=1):
        keep = set(vs)
        missing = keep - set(wdag.nodes)
        if missing:
            raise VariableMismatch(f"variables not in the graph: {sorted(missing)}")
        table = sample(wdag, n, noise, int(s))
        out.append(MarginalDataset.from_samples(f"{prefix}{i}", table.select(v for v in wdag.nodes if v in keep)))
    return out
