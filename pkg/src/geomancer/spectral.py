"""Bottom of the spectrum of symmetric PSD operators, and matrix fields from eigenvectors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .connection import BlockSparseOperator, SymTracelessBasis, operator_matvec

GUARD_STEPS = 60

__all__ = [
    "SpectrumResult",
    "EigensolverError",
    "smallest_eigenpairs",
    "eigenvector_to_fields",
]


class EigensolverError(RuntimeError):
    """The eigensolver stopped before every residual met the tolerance.

    ``partial`` holds the best :class:`SpectrumResult` available (may be None).
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass
class SpectrumResult:
    """Smallest eigenpairs, ascending.

    ``residuals[r] = ||L v_r - lambda_r v_r||`` and ``norm_bound`` is the
    operator-norm estimate the tolerance is measured against.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    norm_bound: float
    n_matvec: int = 0

    @property
    def relative_residuals(self) -> np.ndarray:
        return self.residuals / self.norm_bound

    def to_dict(self) -> dict:
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "residuals": self.residuals.tolist(),
            "norm_bound": self.norm_bound,
            "n_matvec": self.n_matvec,
        }


def _as_operator(op):
    if isinstance(op, BlockSparseOperator):
        return op.shape, lambda x: operator_matvec(op, x), op.norm_bound()
    if sp.issparse(op):
        op = sp.csr_matrix(op)
        bound = float(abs(op).sum(axis=1).max())
        return op.shape, lambda x: op @ x, bound
    op = np.asarray(op, dtype=float)
    return op.shape, lambda x: op @ x, float(np.abs(op).sum(axis=1).max())


def smallest_eigenpairs(op, R: int, tol: float = 1e-7, max_iter: int | None = None, seed=0) -> SpectrumResult:
    """The ``R`` smallest eigenpairs of a symmetric PSD operator.

    Runs implicitly restarted Lanczos (ARPACK) on matrix-vector products only,
    from a seeded random start vector.  Convergence is judged on the relative
    residual ``||L v - lambda v|| <= tol * ||L||``, with ``||L||`` bounded by
    Gershgorin row sums.  ARPACK's own stopping rule is relative to
    ``|lambda|``, so when a pass falls short the ARPACK tolerance is tightened
    and the run restarted from the best current vector.  A deflated check
    afterwards recovers copies of repeated eigenvalues that a single start
    vector cannot reach.

    Parameters
    ----------
    op : BlockSparseOperator, sparse matrix or ndarray
    R : int
        Number of eigenpairs, ``R < dim``.
    tol : float
        Relative residual tolerance.
    max_iter : int, optional
        Lanczos restart budget per pass; default ``10 * R * sqrt(dim)``.
    seed : int
        Seed of the start vector.

    Raises
    ------
    EigensolverError
        If residuals still exceed the tolerance after the budget is spent.
    """
    shape, mv, bound = _as_operator(op)
    n = shape[0]
    if int(R) != R or not 1 <= R < n:
        raise ValueError(f"R must satisfy 1 <= R < dim={n}, got {R!r}")
    R = int(R)
    if max_iter is None:
        max_iter = int(10 * R * math.sqrt(n))
    bound = max(bound, np.finfo(float).tiny)

    count = [0]

    def counted(x):
        count[0] += 1
        return mv(x)

    lin = LinearOperator(shape, matvec=counted, dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(n)
    ncv = min(n, max(2 * R + 1, R + 30))
    arpack_tol = max(100 * tol, 1e-12)
    best = None
    for _ in range(4):
        try:
            vals, vecs = eigsh(lin, k=R, which="SA", tol=arpack_tol, ncv=ncv, v0=v0, maxiter=max_iter)
        except ArpackNoConvergence as exc:
            if len(exc.eigenvalues) == 0:
                raise EigensolverError("eigensolver did not converge", best) from exc
            vals, vecs = exc.eigenvalues, exc.eigenvectors
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        res = np.linalg.norm(np.column_stack([mv(v) for v in vecs.T]) - vecs * vals, axis=0)
        best = SpectrumResult(vals, vecs, res, bound, count[0])
        if len(vals) == R and np.all(res <= tol * bound):
            return _recover_multiplicities(best, shape, counted, tol, max_iter, seed, count)
        arpack_tol /= 100.0
        v0 = vecs.sum(axis=1)
    raise EigensolverError(
        f"eigensolver did not reach relative residual {tol:g}; worst was "
        f"{best.relative_residuals.max():.2e}",
        best,
    )


def _lanczos_lowest(mv, v0, steps):
    """Lowest Ritz pair after ``steps`` Lanczos steps with full reorthogonalization."""
    n = len(v0)
    q = np.empty((steps, n))
    alpha, beta = np.zeros(steps), np.zeros(steps)
    q[0] = v0 / np.linalg.norm(v0)
    m = steps
    for j in range(steps):
        w = mv(q[j])
        alpha[j] = q[j] @ w
        w -= q[:j + 1].T @ (q[:j + 1] @ w)
        w -= q[:j + 1].T @ (q[:j + 1] @ w)
        b = np.linalg.norm(w)
        if j + 1 == steps or b <= 1e-12 * max(abs(alpha[j]), 1.0):
            m = j + 1
            break
        beta[j] = b
        q[j + 1] = w / b
    theta, s = np.linalg.eigh(np.diag(alpha[:m]) + np.diag(beta[:m - 1], 1) + np.diag(beta[:m - 1], -1))
    return theta[0], q[:m].T @ s[:, 0]


def _recover_multiplicities(found, shape, mv, tol, max_iter, seed, count):
    """Add eigenpairs that single-vector Lanczos skipped.

    A Krylov space grown from one start vector holds only one direction of an
    exactly repeated eigenvalue, so ARPACK can return ``lambda_1, lambda_2``
    while a second copy of ``lambda_1`` sits below ``lambda_R``.  The found
    vectors are shifted to the top of the spectrum and a short Lanczos run
    of ``GUARD_STEPS`` steps probes what remains.  Its lowest Ritz value is an
    upper bound, so a value clearly below ``lambda_R`` proves a missing
    eigenpair; that pair is refined and merged by Rayleigh-Ritz on the
    enlarged basis.  Missing copies that only separate after many more steps
    (inside a tight cluster at ``lambda_R``) can go undetected.
    """
    n = shape[0]
    R = len(found.eigenvalues)
    bound = found.norm_bound
    vals, vecs = found.eigenvalues, found.eigenvectors
    rng = np.random.default_rng([seed, 1])
    for _ in range(n - R - 1):
        def deflated_mv(x, v=vecs):
            return mv(x) + 2 * bound * (v @ (v.T @ x))

        theta, w = _lanczos_lowest(deflated_mv, rng.standard_normal(n), min(GUARD_STEPS, n - R))
        if theta >= vals[-1] - 10 * tol * bound:
            break
        deflated = LinearOperator(shape, matvec=deflated_mv, dtype=float)
        try:
            _, w = eigsh(deflated, k=1, which="SA", tol=max(tol, 1e-12), ncv=min(n - 1, 20), v0=w,
                         maxiter=max_iter)
        except ArpackNoConvergence as exc:
            if len(exc.eigenvalues):
                w = exc.eigenvectors
        basis, _ = np.linalg.qr(np.column_stack([vecs, np.reshape(w, (n, -1))[:, :1]]))
        lb = np.column_stack([mv(b) for b in basis.T])
        ritz, coef = np.linalg.eigh(basis.T @ lb)
        vals, vecs = ritz[:R], basis @ coef[:, :R]
    res = np.linalg.norm(np.column_stack([mv(v) for v in vecs.T]) - vecs * vals, axis=0)
    result = SpectrumResult(vals, vecs, res, bound, count[0])
    if np.any(res > tol * bound):
        raise EigensolverError(
            f"merged eigenpairs missed relative residual {tol:g}; worst was "
            f"{result.relative_residuals.max():.2e}",
            result,
        )
    return result


def eigenvector_to_fields(spectrum, basis: SymTracelessBasis, indices=None) -> np.ndarray:
    """Symmetric trace-free matrix fields from projected-operator eigenvectors.

    Returns an array of shape ``(n_fields, t, k, k)``; field ``r`` at point
    ``i`` is the matrix whose coordinates are the ``i``-th block of
    eigenvector ``r``.
    """
    vecs = getattr(spectrum, "eigenvectors", spectrum)
    vecs = np.asarray(vecs, dtype=float)
    if vecs.ndim == 1:
        vecs = vecs[:, None]
    if indices is not None:
        vecs = vecs[:, list(indices)]
    n, n_fields = vecs.shape
    if n % basis.dim:
        raise ValueError(
            f"eigenvector length {n} is not a multiple of the basis dimension {basis.dim}"
        )
    t = n // basis.dim
    coords = vecs.T.reshape(n_fields, t, basis.dim)
    return basis.from_coords(coords)
