import numpy as np
import pytest

from mbse3 import diffcore as dc
from mbse3.backbone import BackboneConfig, extract_features, init_backbone_params, knn_neighborhoods, rotate_feature


@pytest.fixture(scope="module")
def params():
    store = dc.ParamStore()
    init_backbone_params(BackboneConfig(), store, np.random.default_rng(0))
    return store


def _cloud(seed, n=128):
    return np.random.default_rng(seed).uniform(-0.5, 0.5, (n, 3))


def test_knn_single_point():
    assert knn_neighborhoods(np.zeros((1, 3)), 1).tolist() == [[0]]


def test_knn_ties_go_to_lower_index():
    X = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    assert knn_neighborhoods(X, 2)[1].tolist() == [1, 0]


def test_knn_matches_exhaustive_search(rng):
    X = rng.normal(size=(200, 3))
    nbr = knn_neighborhoods(X, 7)
    for i in range(0, 200, 13):
        d = np.linalg.norm(X - X[i], axis=1)
        ref = sorted(range(200), key=lambda j: (d[j], j))[:7]
        assert nbr[i].tolist() == ref


def test_knn_too_many_neighbours():
    with pytest.raises(ValueError):
        knn_neighborhoods(np.zeros((5, 3)), 6)


def test_default_shapes(params):
    F = extract_features(_cloud(0), BackboneConfig(), params)
    assert [f.values.shape for f in F] == [(128, 60, 16), (128, 60, 32)]


def test_translation_invariance(params):
    X = _cloud(1)
    F0 = extract_features(X, BackboneConfig(), params)
    F1 = extract_features(X + np.array([3.0, -7.0, 0.25]), BackboneConfig(), params)
    for a, b in zip(F0, F1):
        assert np.abs(a.values - b.values).max() <= 1e-9 * max(1.0, np.abs(a.values).max())


@pytest.mark.parametrize("seed", [2, 3])
def test_equivariance_for_every_group_element(G, params, seed):
    X = _cloud(seed)
    cfg = BackboneConfig()
    F = extract_features(X, cfg, params)
    for g in range(60):
        Fg = extract_features(X @ G.elements[g].T, cfg, params)
        for a, b in zip(Fg, F):
            ref = rotate_feature(b, g).values
            assert np.abs(a.values - ref).max() <= 1e-5 * np.abs(ref).max()


def test_rotate_feature_identity_inverse_and_composition(G, rng):
    F = rng.normal(size=(4, 60, 3))
    assert np.array_equal(rotate_feature(F, 0), F)
    for g1, g2 in rng.integers(1, 60, (10, 2)):
        assert np.array_equal(rotate_feature(rotate_feature(F, g1), G.inverse[g1]), F)
        lhs = rotate_feature(rotate_feature(F, g1), g2)
        rhs = rotate_feature(F, G.cayley[g2, g1])
        assert np.array_equal(lhs, rhs)


def test_point_permutation_reorders_features(params, rng):
    X = _cloud(4)
    perm = rng.permutation(len(X))
    F = extract_features(X, BackboneConfig(), params)
    Fp = extract_features(X[perm], BackboneConfig(), params)
    for a, b in zip(F, Fp):
        assert np.allclose(a.values[perm], b.values, rtol=1e-10, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_activation_is_reported(params):
    bad = params.copy()
    w = bad["backbone.0.W"].copy()
    w[0, 0] = np.inf
    bad.set("backbone.0.W", w)
    with pytest.raises(FloatingPointError, match="layer 0"):
        extract_features(_cloud(5), BackboneConfig(), bad)


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(neighbors_k=2)
    with pytest.raises(ValueError):
        BackboneConfig(kernel_bandwidth=0.0)
    with pytest.raises(ValueError):
        BackboneConfig(layer_dims=())
