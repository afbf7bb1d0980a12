"""Input checks shared by the public functions."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_points(points) -> np.ndarray:
    """Validate a point cloud: 2-D, float64, finite, at least one row and column."""
    return check_array(points, dtype=np.float64, ensure_2d=True, ensure_all_finite=True, copy=False)


def check_orthonormal(basis: np.ndarray, atol: float = 1e-6, name: str = "basis") -> np.ndarray:
    basis = np.asarray(basis, dtype=float)
    if basis.ndim == 1:
        basis = basis[:, None]
    gram = basis.T @ basis
    err = np.abs(gram - np.eye(gram.shape[0])).max() if gram.size else 0.0
    if err > atol:
        raise ValueError(f"{name} does not have orthonormal columns (max Gram error {err:.2e})")
    return basis
