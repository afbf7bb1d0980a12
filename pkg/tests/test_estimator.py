import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from geomancer import GeometricManifoldComponentEstimator, LaplacianEigenmaps
from geomancer.graph import build_knn_graph
from geomancer.synth import sample_product


@pytest.fixture(scope="module")
def sphere_circle():
    return sample_product("S2xS1", 1500, 0)


def test_params_roundtrip_and_clone():
    est = GeometricManifoldComponentEstimator(k=3, n_eigenpairs=6, random_state=4)
    params = est.get_params()
    assert params["k"] == 3 and params["n_eigenpairs"] == 6 and params["random_state"] == 4
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(k=2)
    assert est.k == 2
    assert clone(LaplacianEigenmaps(n_components=5)).n_components == 5


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        GeometricManifoldComponentEstimator().predict()
    with pytest.raises(NotFittedError):
        LaplacianEigenmaps().transform(np.zeros((3, 2)))


def test_fit_sets_attributes(sphere_circle):
    x, truth = sphere_circle
    est = GeometricManifoldComponentEstimator(k=3).fit(x)
    assert est.n_factors_ == 2 and est.n_features_in_ == 5
    assert est.predict().shape == (1500, 3)
    assert np.all(np.diff(est.eigenvalues_) >= 0)
    dims = sorted(b.shape[1] for b in est.subspaces(0))
    assert dims == [1, 2]
    given = GeometricManifoldComponentEstimator(k=3).fit_predict(x, graph=build_knn_graph(x, 6))
    np.testing.assert_array_equal(given, est.predict())


def test_laplacian_eigenmaps_wrapper():
    x, _ = sample_product("S1", 200, 1)
    lem = LaplacianEigenmaps(n_components=2, n_neighbors=10)
    y = lem.fit_transform(x)
    assert y.shape == (200, 2)
    np.testing.assert_allclose(np.linalg.norm(y, axis=0), 1.0)
    assert lem.transform(x) is y
    with pytest.raises(ValueError):
        lem.transform(x[:10])
