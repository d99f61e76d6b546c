"""Lattice laboratory for loop-soup / Gaussian-free-field couplings."""

from .clusters import (
    CellComplex,
    ClusterDecomposition,
    boundary_cells,
    cable_clusters_batch,
    field_sign_clusters,
    lattice_level_clusters,
    lupu_sign_field,
    lupu_sign_fields,
    separating_count,
    soup_clusters,
)
from .experiments import (
    CouplingReport,
    ExponentTable,
    HeightLabels,
    assemble_neumann,
    exponents,
    oblique_exponent,
    resample_heights,
    run_experiment,
)
from .fields import (
    LAMBDA,
    EdgeZeroMarks,
    FieldSample,
    TestFunction,
    bump_difference,
    cable_zero_marks,
    empirical_covariance,
    harmonic_extension,
    sample_gff,
)
from .graphs import (
    DIRICHLET,
    INTERIOR,
    NEUMANN,
    DomainGraph,
    FoldingMap,
    GreenMatrix,
    avoid_logdet,
    build_domain,
    fold,
    green,
    induced_free_domain,
    transition_kernel,
)
from .harness import (
    ExperimentConfig,
    StatVerdict,
    ks_two_sample,
    make_config,
    moment_ztest,
    parse_config,
    render_report,
    rng_stream,
)
from .soups import (
    Loop,
    LoopSoup,
    SoupBatch,
    hitting_mass,
    loop_mass,
    occupation,
    occupation_batch,
    sample_soup,
    sample_soups,
    trace_series_mass,
)

__version__ = "0.1.0"
