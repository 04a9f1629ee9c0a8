"""Packaged scenarios: generating graphs with chosen coefficients and their marginal layouts.

The coefficients are illustrative choices, not measured data.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

from .graph import WeightedDag, implied_covariance, parse_graph
from .marginals import (
    MarginalDataset,
    PartialCorrelationTable,
    build_correlation_table,
    population_marginals,
    simulate_marginals,
)
from .semsim import NoiseSpec

SCENARIOS = (
    "case_one",
    "case_two",
    "case_three",
    "case_three_latent",
    "redundant_edge",
    "redundant_edge_direct",
    "planning",
)


def fixture_dir() -> Path:
    return Path(str(resources.files("trekunify") / "fixtures"))


def parse_sets(text: str) -> list[tuple[str, ...]]:
    out = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append(tuple(v.strip() for v in line.split(",") if v.strip()))
    return out


@dataclass(frozen=True)
class Scenario:
    name: str

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise KeyError(f"unknown scenario {self.name!r}; choose from {', '.join(SCENARIOS)}")

    @property
    def graph_path(self) -> Path:
        return fixture_dir() / f"{self.name}.graph"

    @property
    def manifest_path(self) -> Path:
        """Exact correlations for each marginal, written by ``trekunify simulate --population``."""
        return fixture_dir() / self.name / "manifest.tsv"

    def triangle_path(self, side: str) -> Path:
        return fixture_dir() / f"{self.name}.{side}"

    @cached_property
    def graph(self) -> WeightedDag:
        return parse_graph(self.graph_path.read_text(), str(self.graph_path))

    @cached_property
    def sets(self) -> list[tuple[str, ...]]:
        return parse_sets((fixture_dir() / f"{self.name}.sets").read_text())

    def population_marginals(self, sets=None) -> list[MarginalDataset]:
        return population_marginals(implied_covariance(self.graph), sets or self.sets)

    def sample_marginals(self, n: int, seed: int = 0, noise: NoiseSpec = NoiseSpec()) -> list[MarginalDataset]:
        return simulate_marginals(self.graph, self.sets, n, seed, noise)

    def table(self) -> PartialCorrelationTable:
        return build_correlation_table(self.population_marginals(), population=True)


def scenario(name: str) -> Scenario:
    return Scenario(name.replace("-", "_"))
