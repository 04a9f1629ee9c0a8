"""Simulation from a WeightedDag and the Gaussian CI machinery.

Everything downstream takes a correlation matrix plus a sample size.  A
sample size of ``math.inf`` (``POPULATION``) switches tests to exact
comparisons with an absolute tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np
from scipy.stats import norm

from .errors import (
    ArityMismatch,
    DegenerateColumn,
    InsufficientSample,
    SingularConditioning,
)
from .graph import CorrelationMatrix, WeightedDag, check_calibrated

POPULATION = math.inf
POPULATION_TOL = 1e-9
CONDITION_LIMIT = 1e10

NoiseFamily = Literal["gaussian", "uniform", "laplace"]
NOISE_FAMILIES = ("gaussian", "uniform", "laplace")


@dataclass(frozen=True)
class NoiseSpec:
    family: NoiseFamily = "uniform"

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ValueError(f"noise family must be one of {NOISE_FAMILIES}, got {self.family!r}")

    def draw(self, rng: np.random.Generator, n: int, var: float) -> np.ndarray:
        sd = math.sqrt(var)
        if self.family == "gaussian":
            return rng.normal(0.0, sd, n)
        if self.family == "uniform":
            half = math.sqrt(3.0) * sd
            return rng.uniform(-half, half, n)
        return rng.laplace(0.0, sd / math.sqrt(2.0), n)


@dataclass(frozen=True)
class SampleTable:
    variables: tuple[str, ...]
    rows: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != len(self.variables):
            raise ValueError(f"rows must be n x {len(self.variables)}, got {rows.shape}")
        if rows.shape[0] < 1:
            raise ValueError("a sample table needs at least one row")
        if not np.all(np.isfinite(rows)):
            raise ValueError("sample table has missing or non-finite values")
        rows.flags.writeable = False
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def select(self, keep: Iterable[str]) -> "SampleTable":
        keep = list(keep)
        idx = [self.variables.index(v) for v in keep]
        return SampleTable(tuple(keep), self.rows[:, idx], self.seed)


@dataclass(frozen=True)
class CiStatement:
    x: str
    y: str
    given: frozenset[str]
    independent: bool
    p_value: float
    source: str = ""

    def __post_init__(self):
        given = frozenset(self.given)
        if self.x == self.y:
            raise ValueError("CI statement needs two distinct variables")
        if self.x in given or self.y in given:
            raise ValueError("conditioning set contains an endpoint")
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")
        # canonical orientation of the pair
        x, y = sorted((self.x, self.y))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "given", given)

    @property
    def verdict(self) -> str:
        return "independent" if self.independent else "dependent"

    @property
    def key(self) -> tuple[str, str, frozenset[str]]:
        return self.x, self.y, self.given

    def __str__(self) -> str:
        rel = "_||_" if self.independent else "not _||_"
        cond = " | " + ",".join(sorted(self.given)) if self.given else ""
        return f"{self.x} {rel} {self.y}{cond}"


def sample(wdag: WeightedDag, n: int, noise: NoiseSpec = NoiseSpec(), seed: int = 0) -> SampleTable:
    """Draw ``n`` rows from the structural equations in topological order."""
    check_calibrated(wdag)
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    nodes = wdag.nodes
    cols: dict[str, np.ndarray] = {}
    for v in wdag.dag.topological_order:
        col = noise.draw(rng, n, wdag.disturbance_var[v])
        for p in sorted(wdag.dag.parents[v]):
            col = col + wdag.coeff[(p, v)] * cols[p]
        cols[v] = col
    return SampleTable(nodes, np.column_stack([cols[v] for v in nodes]), seed)


def empirical_correlation(table: SampleTable) -> CorrelationMatrix:
    if table.n < 3:
        raise InsufficientSample(f"need at least 3 rows, got {table.n}")
    sd = table.rows.std(axis=0)
    flat = [v for v, s in zip(table.variables, sd) if not s > 0]
    if flat:
        raise DegenerateColumn(f"zero-variance columns: {flat}")
    r = np.corrcoef(table.rows, rowvar=False)
    r = np.atleast_2d(r)
    np.fill_diagonal(r, 1.0)
    return CorrelationMatrix(table.variables, np.clip(r, -1.0, 1.0), atol=1e-9)


def partial_correlation(corr: CorrelationMatrix, x: str, y: str, given: Iterable[str] = ()) -> float:
    """Partial correlation of x and y given ``given`` (inverse-submatrix formula)."""
    given = sorted(set(given))
    ix, iy = corr.index(x), corr.index(y)
    if not given:
        return float(corr.values[ix, iy])
    if x in given or y in given or x == y:
        raise ValueError("x, y must be distinct and outside the conditioning set")
    iz = [corr.index(v) for v in given]
    sz = corr.values[np.ix_(iz, iz)]
    if np.linalg.cond(sz) > CONDITION_LIMIT:
        raise SingularConditioning(f"conditioning set {given} is numerically singular")
    idx = [ix, iy] + iz
    sub = corr.values[np.ix_(idx, idx)]
    cond = np.linalg.cond(sub)
    if cond > CONDITION_LIMIT:
        raise SingularConditioning(f"correlation submatrix over {[x, y, *given]} is numerically singular")
    prec = np.linalg.inv(sub)
    r = -prec[0, 1] / math.sqrt(prec[0, 0] * prec[1, 1])
    return float(min(1.0, max(-1.0, r)))


def fisher_z(r: float) -> float:
    return math.atanh(min(max(r, -1.0 + 1e-16), 1.0 - 1e-16))


def ci_test(
    corr: CorrelationMatrix,
    n: float,
    x: str,
    y: str,
    given: Iterable[str] = (),
    alpha: float = 0.01,
    *,
    tol: float = POPULATION_TOL,
    source: str = "",
) -> CiStatement:
    """Fisher-z test of x _||_ y | given.

    With ``n == POPULATION`` the verdict is ``|r| <= tol`` and the p-value is 1.
    """
    given = frozenset(given)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    r = partial_correlation(corr, x, y, given)
    if math.isinf(n):
        return CiStatement(x, y, given, bool(abs(r) <= tol), 1.0, source)
    dof = n - len(given) - 3
    if dof <= 0:
        raise InsufficientSample(f"n={n} too small for a conditioning set of size {len(given)}")
    stat = math.sqrt(dof) * abs(fisher_z(r))
    p = float(min(1.0, 2.0 * norm.sf(stat)))
    return CiStatement(x, y, given, bool(stat <= norm.isf(alpha / 2.0)), p, source)


def pooled_ci_test(
    rs: list[float], ns: list[float], x: str, y: str, given: Iterable[str], alpha: float, source: str
) -> CiStatement:
    """One Fisher-z test on the inverse-variance pooled transform of several estimates."""
    given = frozenset(given)
    w = [n - len(given) - 3 for n in ns]
    if min(w) <= 0:
        raise InsufficientSample("sample too small for pooled test")
    z = sum(wi * fisher_z(r) for wi, r in zip(w, rs)) / sum(w)
    stat = math.sqrt(sum(w)) * abs(z)
    p = float(min(1.0, 2.0 * norm.sf(stat)))
    return CiStatement(x, y, given, bool(stat <= norm.isf(alpha / 2.0)), p, source)


def collider_signature(corr: CorrelationMatrix, n: float = POPULATION, alpha: float = 0.01) -> bool:
    """True iff every pair's partial correlation (given the third) differs from its marginal.

    Sample mode compares Fisher-z transforms against the combined standard
    error scaled by the two-sided critical value for ``alpha``.
    """
    if len(corr.variables) != 3:
        raise ArityMismatch(f"collider signature needs exactly 3 variables, got {len(corr.variables)}")
    a, b, c = corr.variables
    crit = norm.isf(alpha / 2.0)
    for x, y, z in ((a, b, c), (a, c, b), (b, c, a)):
        marg = corr[x, y]
        part = partial_correlation(corr, x, y, [z])
        if math.isinf(n):
            differs = abs(part - marg) > POPULATION_TOL
        else:
            se = math.sqrt(1.0 / (n - 4) + 1.0 / (n - 3))
            differs = abs(fisher_z(part) - fisher_z(marg)) > crit * se
        if not differs:
            return False
    return True


def correlation_se(r: float, n: float) -> float:
    """Large-sample standard error of a correlation estimate; 0 in population mode."""
    if math.isinf(n):
        return 0.0
    return (1.0 - r * r) / math.sqrt(max(n - 3.0, 1.0))
