"""Tests for the random forest regressor"""

import logging

import numpy as np
import pytest

from dv_mobility.errors import ParameterError
from dv_mobility.evaluation import kfold_split
from dv_mobility.models.forest import (
    ForestModel,
    RfConfig,
    RfModel,
    resolve_m_try,
    rf_grid_search,
    rf_predict,
    rf_train,
)


@pytest.fixture()
def dominant_data(rng):
    """One informative feature among four."""
    X = rng.standard_normal((120, 4))
    y = 5.0 * X[:, 0] + 0.1 * rng.standard_normal(120)
    return X, y


@pytest.mark.parametrize(
    "rule, n_features, expected",
    [
        ("all", 23, 23),
        ("sqrt", 23, 4),
        ("log2", 23, 4),
        ("half", 23, 11),
        ("third", 23, 7),
        ("third", 2, 1),
        ("log2", 1, 1),
        (3, 23, 3),
    ],
)
def test_resolve_m_try(rule, n_features, expected):
    assert resolve_m_try(rule, n_features) == expected


@pytest.mark.parametrize("rule", [0, 24, "cube"])
def test_resolve_m_try_invalid(rule):
    with pytest.raises(ParameterError):
        resolve_m_try(rule, 23)


@pytest.mark.parametrize(
    "kwargs",
    [{"n_tree": 0}, {"min_leaf": 0}, {"max_depth": -1}, {"m_try": "most"}],
)
def test_rf_config_invalid(kwargs):
    with pytest.raises(ParameterError):
        RfConfig(**kwargs)


def test_importance_sums_to_one(dominant_data):
    X, y = dominant_data
    model = rf_train(X, y, RfConfig(n_tree=20, seed=3))
    assert model.importance.sum() == pytest.approx(1.0)
    assert np.all(model.importance >= 0)
    assert model.importance_defined


def test_importance_dominant_feature(dominant_data):
    """Assert the only informative feature dominates the importance"""
    X, y = dominant_data
    model = rf_train(X, y, RfConfig(n_tree=30, m_try="all", seed=1))
    assert model.importance[0] > 0.8
    assert np.argmax(model.importance) == 0


def test_single_tree_interpolates(rng):
    """Assert an unpruned tree without bootstrap reproduces its targets"""
    X = rng.standard_normal((40, 3))
    y = rng.standard_normal(40)
    config = RfConfig(n_tree=1, m_try="all", bootstrap=False)
    model = rf_train(X, y, config)
    np.testing.assert_allclose(rf_predict(model, X), y)


def test_min_leaf_and_depth(rng):
    X = rng.standard_normal((50, 2))
    y = rng.standard_normal(50)
    config = RfConfig(n_tree=1, m_try="all", min_leaf=5, bootstrap=False)
    tree = rf_train(X, y, config).trees[0]
    leaves = tree.feature < 0
    assert np.all(tree.n_samples[leaves] >= 5)
    stump = rf_train(X, y, RfConfig(n_tree=1, max_depth=1)).trees[0]
    assert stump.n_leaves <= 2


def test_deterministic(dominant_data):
    X, y = dominant_data
    config = RfConfig(n_tree=10, seed=42)
    first = rf_train(X, y, config)
    second = rf_train(X, y, config, threads=4)
    np.testing.assert_array_equal(first.predict(X), second.predict(X))
    np.testing.assert_array_equal(first.importance, second.importance)


def test_leading_trees_match_smaller_forest(dominant_data):
    """Assert the first trees of a forest equal a smaller forest"""
    X, y = dominant_data
    large = rf_train(X, y, RfConfig(n_tree=12, seed=5))
    small = rf_train(X, y, RfConfig(n_tree=4, seed=5))
    np.testing.assert_array_equal(
        large.tree_predictions(X)[:4], small.tree_predictions(X)
    )


def test_seed_changes_forest(dominant_data):
    X, y = dominant_data
    a = rf_train(X, y, RfConfig(n_tree=5, seed=1))
    b = rf_train(X, y, RfConfig(n_tree=5, seed=2))
    assert not np.array_equal(a.predict(X), b.predict(X))


def test_constant_target(rng, caplog):
    """Assert importance is undefined when no tree can split"""
    caplog.set_level(logging.WARNING)
    X = rng.standard_normal((20, 3))
    model = rf_train(X, np.full(20, 2.5), RfConfig(n_tree=5))
    assert not model.importance_defined
    np.testing.assert_array_equal(model.importance, 0.0)
    np.testing.assert_allclose(model.predict(X), 2.5)
    assert "importance is undefined" in caplog.text


def test_rf_model_dict(dominant_data):
    X, y = dominant_data
    model = rf_train(X, y, RfConfig(n_tree=3), columns=["a", "b", "c", "d"])
    loaded = RfModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(loaded.predict(X), model.predict(X))
    assert loaded.columns == ("a", "b", "c", "d")
    assert loaded.config == model.config


def test_rf_model_rejects_wrong_width(dominant_data):
    X, y = dominant_data
    model = rf_train(X, y, RfConfig(n_tree=2))
    with pytest.raises(ParameterError):
        model.predict(X[:, :3])


def test_rf_train_invalid_inputs(rng):
    with pytest.raises(ParameterError):
        rf_train(rng.standard_normal((1, 2)), [1.0])
    with pytest.raises(ParameterError):
        rf_train([[0.0], [np.nan]], [1.0, 2.0])


def test_rf_grid_search(dominant_data):
    X, y = dominant_data
    folds = kfold_split(len(y), 3, 7)
    result = rf_grid_search(
        X,
        y,
        n_trees=(5, 10),
        m_try_rules=("all", "sqrt"),
        folds=folds,
        seed=3,
    )
    assert len(result.scores) == 4
    assert result.best.n_tree in (5, 10)
    assert result.best.m_try in ("all", "sqrt")
    assert result.best_score == pytest.approx(result.scores["mean_r2"].max())
    assert result.best_score > 0.5


def test_rf_grid_search_empty_grid(dominant_data):
    X, y = dominant_data
    with pytest.raises(ParameterError):
        rf_grid_search(X, y, n_trees=())


def test_forest_model(dominant_data):
    X, y = dominant_data
    model = ForestModel(
        columns=["a", "b", "c", "d"], config=RfConfig(n_tree=5)
    ).fit(X, y)
    summary = model.summary()
    assert summary["n_tree"] == 5
    assert set(summary["importance"]) == {"a", "b", "c", "d"}
    assert model.importance.sum() == pytest.approx(1.0)
    assert model.predict(X).shape == (120,)
