"""Tangent-space factorization of sampled product manifolds."""
from .connection import (
    BlockSparseOperator,
    ConnectionGraph,
    assemble_connection_laplacian,
    connect_frames,
    connect_graph,
    orient_frames,
    symmetric_traceless_basis,
)
from .estimator import GeometricManifoldComponentEstimator, LaplacianEigenmaps
from .evaluate import (
    ErrorReport,
    align_to_ground_truth,
    chance_baseline,
    disentangling_error,
    principal_angles,
    shape_accuracy,
)
from .factorize import (
    Factorization,
    GeomancerConfig,
    NoProductStructureWarning,
    StageError,
    cluster_simplex_corners,
    detect_spectral_gap,
    joint_diagonalize,
    run_geomancer,
)
from .graph import NeighborGraph, build_knn_graph, estimate_tangent_frames, laplacian_eigenmaps_embed
from .spectral import EigensolverError, SpectrumResult, eigenvector_to_fields, smallest_eigenpairs
from .synth import ManifoldSpec, parse_spec, sample_product

__version__ = "0.1.0"

__all__ = [
    "BlockSparseOperator",
    "ConnectionGraph",
    "EigensolverError",
    "ErrorReport",
    "Factorization",
    "GeomancerConfig",
    "GeometricManifoldComponentEstimator",
    "LaplacianEigenmaps",
    "ManifoldSpec",
    "NeighborGraph",
    "NoProductStructureWarning",
    "SpectrumResult",
    "StageError",
    "align_to_ground_truth",
    "assemble_connection_laplacian",
    "build_knn_graph",
    "chance_baseline",
    "cluster_simplex_corners",
    "connect_frames",
    "connect_graph",
    "detect_spectral_gap",
    "disentangling_error",
    "eigenvector_to_fields",
    "estimate_tangent_frames",
    "joint_diagonalize",
    "laplacian_eigenmaps_embed",
    "orient_frames",
    "parse_spec",
    "principal_angles",
    "run_geomancer",
    "sample_product",
    "shape_accuracy",
    "smallest_eigenpairs",
    "symmetric_traceless_basis",
]
