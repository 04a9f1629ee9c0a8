"""Unify linear causal models learned from overlapping marginal datasets."""

from .errors import TrekUnifyError
from .graph import (
    CorrelationMatrix,
    Dag,
    Trek,
    WeightedDag,
    calibrate_standardized,
    d_separated,
    enumerate_treks,
    implied_covariance,
    markov_equivalent,
    parse_graph,
    trek_correlation,
    weighted,
)
from .marginals import (
    MarginalDataset,
    PartialCorrelationTable,
    build_correlation_table,
    extract_ci,
    load_marginals,
    population_marginals,
    simulate_marginals,
)
from .planner import (
    chain_membership_test,
    hypothesize_treks,
    plan,
    propose_measurements,
    second_trek_membership_test,
    two_trek_decomposition_test,
)
from .semsim import NoiseSpec, ci_test, empirical_correlation, partial_correlation, sample
from .unify import (
    Candidate,
    PartialGraph,
    PruneOptions,
    PruneReport,
    chain_order,
    enumerate_candidates,
    latent_check,
    mediation_inequality_prune,
    prune_pipeline,
    redundant_edge_check,
    refine_with_new_marginal,
)

__version__ = "0.1.0"
