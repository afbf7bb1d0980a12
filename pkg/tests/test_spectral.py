import numpy as np
import pytest
import scipy.sparse as sp

from geomancer.connection import (
    BlockSparseOperator,
    assemble_connection_laplacian,
    connect_graph,
    symmetric_traceless_basis,
)
from geomancer.graph import build_knn_graph, estimate_tangent_frames, scalar_laplacian
from geomancer.spectral import EigensolverError, eigenvector_to_fields, smallest_eigenpairs
from geomancer.synth import sample_product


def _projected(spec="S2xS1", t=100, seed=0):
    x, _ = sample_product(spec, t, seed)
    k = sum(int(s[1:]) for s in spec.split("x"))
    g = build_knn_graph(x, 2 * k)
    conn = connect_graph(g, estimate_tangent_frames(x, g, k))
    basis = symmetric_traceless_basis(k)
    return assemble_connection_laplacian(g, conn, basis, 2), basis


def test_scalar_laplacian_kernel():
    x, _ = sample_product("S2", 300, 1)
    lap = scalar_laplacian(build_knn_graph(x, 6))
    res = smallest_eigenpairs(lap, 3, tol=1e-9)
    assert abs(res.eigenvalues[0]) <= 1e-9 * res.norm_bound
    v = res.eigenvectors[:, 0]
    np.testing.assert_allclose(np.abs(v), 1 / np.sqrt(300), atol=1e-6)


@pytest.mark.parametrize("spec,t", [("S2xS1", 150), ("S1xS1", 200), ("S2", 120)])
def test_matches_dense_eigensolve(spec, t):
    op, _ = _projected(spec, t)
    res = smallest_eigenpairs(op, 10)
    dense = np.linalg.eigvalsh(op.toarray())[:10]
    np.testing.assert_allclose(res.eigenvalues, dense, rtol=1e-6)


def test_residual_contract_and_orthonormality():
    op, _ = _projected("S2xS1", 200)
    res = smallest_eigenpairs(op, 8, tol=1e-7, seed=3)
    assert np.all(res.residuals <= 1e-7 * res.norm_bound)
    v = res.eigenvectors
    assert np.abs(v.T @ v - np.eye(8)).max() < 1e-8
    assert np.all(np.diff(res.eigenvalues) >= 0)
    assert res.eigenvalues[0] >= -1e-8
    assert res.norm_bound >= np.linalg.norm(op.toarray(), 2)


def test_direct_sum_doubles_multiplicity():
    op, _ = _projected("S2xS1", 80)
    a = op.tobsr()
    both = sp.block_diag([a, a]).tocsr()
    single = smallest_eigenpairs(op, 4).eigenvalues
    double = smallest_eigenpairs(both, 8).eigenvalues
    np.testing.assert_allclose(double, np.repeat(single, 2), rtol=1e-6)


def test_seed_insensitive_eigenvalues():
    op, _ = _projected("S2xS1", 200)
    a = smallest_eigenpairs(op, 6, tol=1e-7, seed=0)
    b = smallest_eigenpairs(op, 6, tol=1e-7, seed=11)
    assert np.abs(a.eigenvalues - b.eigenvalues).max() <= 10 * 1e-7 * a.norm_bound


def test_deterministic_given_seed():
    op, _ = _projected("S2xS1", 150)
    a = smallest_eigenpairs(op, 5, seed=2)
    b = smallest_eigenpairs(op, 5, seed=2)
    assert a.eigenvectors.tobytes() == b.eigenvectors.tobytes()


def test_non_convergence_raises_with_partial():
    op, _ = _projected("S2xS1", 200)
    with pytest.raises(EigensolverError) as info:
        smallest_eigenpairs(op, 6, tol=1e-15, max_iter=2)
    assert hasattr(info.value, "partial")


def test_bad_count():
    op, _ = _projected("S2", 30)
    with pytest.raises(ValueError):
        smallest_eigenpairs(op, op.shape[0])
    with pytest.raises(ValueError):
        smallest_eigenpairs(op, 0)


def test_fields_from_basis_coordinates():
    basis = symmetric_traceless_basis(3)
    rng = np.random.default_rng(4)
    s = rng.standard_normal((3, 3))
    s = s + s.T
    s -= np.trace(s) / 3 * np.eye(3)
    vec = np.zeros((4 * basis.dim, 1))
    vec[2 * basis.dim:3 * basis.dim, 0] = basis.matrix.T @ s.ravel(order="F")
    fields = eigenvector_to_fields(vec, basis)
    assert fields.shape == (1, 4, 3, 3)
    np.testing.assert_allclose(fields[0, 2], s, atol=1e-12)
    assert np.abs(fields[0, [0, 1, 3]]).max() == 0


def test_fields_symmetric_traceless():
    op, basis = _projected("S2xS1", 100)
    res = smallest_eigenpairs(op, 4)
    fields = eigenvector_to_fields(res, basis)
    assert np.abs(np.trace(fields, axis1=2, axis2=3)).max() < 1e-8
    assert np.abs(fields - fields.transpose(0, 1, 3, 2)).max() < 1e-10
    with pytest.raises(ValueError):
        eigenvector_to_fields(np.ones((basis.dim * 3 + 1, 1)), basis)


def test_accepts_block_operator_and_dense():
    op, _ = _projected("S2", 40)
    assert isinstance(op, BlockSparseOperator)
    a = smallest_eigenpairs(op, 3).eigenvalues
    b = smallest_eigenpairs(op.toarray(), 3).eigenvalues
    np.testing.assert_allclose(a, b, rtol=1e-8)
