"""scikit-learn style wrappers around the pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .factorize import GeomancerConfig, run_geomancer
from .graph import build_knn_graph, laplacian_eigenmaps_embed

__all__ = ["GeometricManifoldComponentEstimator", "LaplacianEigenmaps"]


class GeometricManifoldComponentEstimator(BaseEstimator):
    """Split the tangent space at every sample into product-factor subspaces.

    Parameters
    ----------
    k : int
        Intrinsic dimension of the sampled manifold.
    k_neighbors : int, optional
        Neighbors per point; default ``2 * k``.
    n_eigenpairs : int
        Bottom eigenpairs of the second-order connection Laplacian to compute.
    gamma : "auto" or float
        Spectral-gap rule; a number is used as an eigenvalue threshold.
    min_gap_ratio : float
        In ``"auto"`` mode, the smallest eigenvalue ratio accepted as a gap.
    eig_tol, ffdiag_tol : float
        Eigensolver relative residual and joint-diagonalization tolerance.
    cluster_threshold : float
        Cosine similarity above which two diagonal signatures share a factor.
    random_state : int
        Seed of the eigensolver start vector.

    Attributes
    ----------
    factorization_ : Factorization
    n_factors_ : int
    eigenvalues_ : ndarray
    """

    def __init__(self, k=2, k_neighbors=None, n_eigenpairs=10, gamma="auto", min_gap_ratio=5.0,
                 eig_tol=1e-7, ffdiag_tol=1e-12, cluster_threshold=0.5, random_state=0):
        self.k = k
        self.k_neighbors = k_neighbors
        self.n_eigenpairs = n_eigenpairs
        self.gamma = gamma
        self.min_gap_ratio = min_gap_ratio
        self.eig_tol = eig_tol
        self.ffdiag_tol = ffdiag_tol
        self.cluster_threshold = cluster_threshold
        self.random_state = random_state

    def _config(self) -> GeomancerConfig:
        return GeomancerConfig(
            k_neighbors=self.k_neighbors,
            n_eigenpairs=self.n_eigenpairs,
            gamma=self.gamma,
            min_gap_ratio=self.min_gap_ratio,
            eig_tol=self.eig_tol,
            ffdiag_tol=self.ffdiag_tol,
            cluster_threshold=self.cluster_threshold,
            seed=self.random_state,
        )

    def fit(self, X, y=None, graph=None):
        """Run the factorization on ``X`` of shape ``(t, n)``.

        ``graph`` optionally supplies the neighbor graph.
        """
        X = check_points(X)
        self.factorization_ = run_geomancer(X, self.k, self._config(), graph=graph)
        self.n_factors_ = int(self.factorization_.n_factors)
        self.eigenvalues_ = self.factorization_.eigenvalues
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X=None):
        """Cluster label of each rotated tangent direction, shape ``(t, k)``."""
        check_is_fitted(self, "factorization_")
        return self.factorization_.labels

    def fit_predict(self, X, y=None, graph=None):
        return self.fit(X, graph=graph).predict()

    def subspaces(self, i: int) -> list:
        """Ambient bases of the factor subspaces at sample ``i``."""
        check_is_fitted(self, "factorization_")
        return self.factorization_.subspaces(i)


class LaplacianEigenmaps(TransformerMixin, BaseEstimator):
    """Embedding by the low eigenvectors of an unweighted kNN graph Laplacian.

    Columns are unit-norm; the constant eigenvector is dropped.
    """

    def __init__(self, n_components=2, n_neighbors=10, random_state=0):
        self.n_components = n_components
        self.n_neighbors = n_neighbors
        self.random_state = random_state

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self

    def fit_transform(self, X, y=None):
        X = check_points(X)
        self.graph_ = build_knn_graph(X, self.n_neighbors)
        self.embedding_ = laplacian_eigenmaps_embed(self.graph_, self.n_components, seed=self.random_state)
        self.n_features_in_ = X.shape[1]
        return self.embedding_

    def transform(self, X):
        """The training embedding; out-of-sample extension is not provided."""
        check_is_fitted(self, "embedding_")
        if len(X) != len(self.embedding_):
            raise ValueError("LaplacianEigenmaps only embeds the points it was fit on")
        return self.embedding_
