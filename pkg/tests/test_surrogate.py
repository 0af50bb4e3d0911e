import numpy as np
import pytest

from mergeforge.surrogate import ConstantTree, Forest, ForestParams, fit, predict


def test_constant_target():
    rng = np.random.default_rng(0)
    X = rng.random((30, 4))
    forest = fit(X, np.full(30, 0.7), seed=1)
    mean, var = forest.predict_many(rng.random((10, 4)))
    np.testing.assert_allclose(mean, 0.7)
    assert np.all(var == 0)


def test_same_seed_same_predictions():
    rng = np.random.default_rng(1)
    X, y = rng.random((40, 5)), rng.random(40)
    probe = rng.random((20, 5))
    a = fit(X, y, seed=3).predict_many(probe)
    b = fit(X, y, seed=3).predict_many(probe)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sum_grid_r2():
    g = np.linspace(0, 1, 10)
    xx, yy = np.meshgrid(g, np.linspace(0, 1, 20))
    X = np.column_stack([xx.ravel(), yy.ravel()])
    y = X.sum(axis=1)
    mean, _ = fit(X, y, seed=0).predict_many(X)
    r2 = 1 - np.sum((y - mean) ** 2) / np.sum((y - y.mean()) ** 2)
    assert r2 >= 0.9


def test_hand_built_two_tree_forest():
    forest = Forest([ConstantTree(1.0, 3), ConstantTree(3.0, 3)], 3)
    assert predict(forest, np.zeros(3)) == (2.0, 1.0)


def test_single_tree_has_no_variance():
    rng = np.random.default_rng(2)
    X, y = rng.random((25, 3)), rng.random(25)
    forest = fit(X, y, ForestParams(n_trees=1), seed=0)
    _, var = forest.predict_many(rng.random((8, 3)))
    assert np.all(var == 0)


def test_predictions_within_target_range_and_leaf_size():
    rng = np.random.default_rng(3)
    X, y = rng.random((60, 4)), rng.normal(size=60)
    params = ForestParams(n_trees=10, min_leaf=3)
    forest = fit(X, y, params, seed=5)
    mean, var = forest.predict_many(rng.normal(scale=3, size=(50, 4)))
    assert np.all(mean >= y.min() - 1e-12) and np.all(mean <= y.max() + 1e-12)
    assert np.all(var >= 0)
    for tree in forest.trees:
        leaves = tree.tree_.children_left == -1
        assert np.all(tree.tree_.n_node_samples[leaves] >= 3)


def test_errors():
    with pytest.raises(ValueError):
        fit(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        fit(np.zeros((2, 2)), np.array([1.0, np.nan]))
    forest = fit(np.zeros((3, 2)), np.ones(3))
    with pytest.raises(ValueError):
        predict(forest, np.zeros(3))
    with pytest.raises(ValueError):
        Forest([], 2)


def test_params_roundtrip():
    p = ForestParams(n_trees=7, feature_ratio=0.5, min_leaf=2, bootstrap=False)
    assert ForestParams.from_dict(p.to_dict()) == p
