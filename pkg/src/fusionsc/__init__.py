"""Fusion subspace clustering for complete and incomplete data."""

from .completion import ClusterModel, average_bases, coefficients, complete
from .data import (
    ObservedMatrix,
    SyntheticInstance,
    SyntheticSpec,
    clustering_error,
    generate_synthetic,
    load_labels,
    load_matrix,
    sample_mask,
    save_labels,
    save_matrix,
)
from .errors import FSCError
from .metrics import (
    ObservedColumn,
    SubspaceBasis,
    orthonormalize,
    point_residual,
    projector,
    subspace_distance,
)
from .modelselect import ClusterpathRecord, count_clusters, goodness_of_fit, lambda_sweep, select_model
from .solver import (
    FusionConfig,
    SolverState,
    WeightMatrix,
    compute_weights,
    full_gradient,
    fusion_gradient,
    init_bases,
    objective,
    residual_gradient,
    solve,
)
from .spectral import ClusterAssignment, cluster, kmeans, similarity, spectral_embed

__version__ = "0.1.0"
