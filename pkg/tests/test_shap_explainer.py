"""
TreeSHAP Test Suite - hbscreen

Checks the polynomial-time tree attributions against a brute-force Shapley
computation over the cover-weighted conditional expectation, plus the
efficiency, dummy and linearity properties and the derived reports.
"""

import itertools
import json
import math

import numpy as np
import pandas as pd
import pytest

from hbscreen.core.exceptions import FeatureMismatchError, MissingCoverError
from hbscreen.tools.gbm_regressor import GbmHyperparams, GbmModel, TreeNode, predict, train
from hbscreen.tools.shap_explainer import (
    ShapExplanation,
    TreeShapExplainer,
    category_importance,
    dependence_data,
    explain_rows,
    global_importance,
    top_features,
    tree_shap,
    waterfall_data,
    wavelength_importance,
)


def conditional_expectation(node, x, subset):
    if node.is_leaf:
        return node.value
    if node.feature_index in subset:
        child = node.left if x[node.feature_index] <= node.threshold else node.right
        return conditional_expectation(child, x, subset)
    lw, rw = node.left.cover, node.right.cover
    return (
        conditional_expectation(node.left, x, subset) * lw + conditional_expectation(node.right, x, subset) * rw
    ) / (lw + rw)


def brute_force_shap(model, x):
    m = model.n_features

    def value(subset):
        return model.base_score + model.learning_rate * sum(conditional_expectation(t, x, subset) for t in model.trees)

    phi = np.zeros(m)
    for i in range(m):
        others = [j for j in range(m) if j != i]
        for size in range(m):
            weight = math.factorial(size) * math.factorial(m - size - 1) / math.factorial(m)
            for subset in itertools.combinations(others, size):
                phi[i] += weight * (value(set(subset) | {i}) - value(set(subset)))
    return phi


def random_model(seed, n_trees=3, p=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, p))
    y = X @ rng.normal(size=p) + np.sin(3 * X[:, 0]) * X[:, 1] + rng.normal(scale=0.1, size=30)
    params = GbmHyperparams(n_trees=n_trees, learning_rate=0.3, max_depth=3, min_samples_leaf=2)
    model, _ = train(X, y, params)
    return model, X


def and_tree():
    """x0 > 0.5 and x1 > 0.5 -> 1, else 0; every leaf holds one training row."""
    def leaf(value):
        return TreeNode(cover=1, value=value)

    def split(feature, left, right, cover):
        return TreeNode(cover=cover, feature_index=feature, threshold=0.5, split_gain=1.0, left=left, right=right)

    return split(0, split(1, leaf(0.0), leaf(0.0), 2), split(1, leaf(0.0), leaf(1.0), 2), 4)


class TestExactness:
    def test_matches_brute_force(self):
        for seed in range(100):
            model, X = random_model(seed)
            values = TreeShapExplainer(model).shap_values(X[:3])
            for row, phi in zip(X[:3], values):
                np.testing.assert_allclose(phi, brute_force_shap(model, row), rtol=1e-8, atol=1e-10)

    def test_repeated_feature_on_path(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(40, 2))
        y = np.where(X[:, 0] > 0.3, 2.0, 0.0) + np.where(X[:, 0] > -0.4, 1.0, 0.0) + 0.5 * X[:, 1]
        model, _ = train(X, y, GbmHyperparams(n_trees=2, learning_rate=1.0, max_depth=3, min_samples_leaf=1))
        for row in X[:5]:
            np.testing.assert_allclose(
                TreeShapExplainer(model).shap_values(row)[0], brute_force_shap(model, row), rtol=1e-8, atol=1e-10
            )

    def test_symmetric_and(self):
        model = GbmModel(base_score=0.0, learning_rate=1.0, trees=[and_tree()], feature_names=["x0", "x1"])
        explanation = tree_shap(model, np.array([1.0, 1.0]))
        assert explanation.base_value == pytest.approx(0.25)
        assert explanation.phi == {"x0": pytest.approx(0.375), "x1": pytest.approx(0.375)}
        assert explanation.prediction == 1.0


class TestProperties:
    def test_efficiency(self):
        for seed in range(20):
            model, X = random_model(seed, n_trees=10)
            explainer = TreeShapExplainer(model)
            values = explainer.shap_values(X)
            np.testing.assert_allclose(explainer.expected_value + values.sum(axis=1), predict(model, X), atol=1e-9)

    def test_dummy_feature(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(30, 3))
        X[:, 2] = 7.0
        model, _ = train(X, X[:, 0] * 3 + X[:, 1], GbmHyperparams(n_trees=10))
        values = TreeShapExplainer(model).shap_values(X)
        assert np.all(values[:, 2] == 0.0)

    def test_no_trees(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(10, 2))
        y = rng.normal(130, 5, 10)
        model, _ = train(X, y, GbmHyperparams(n_trees=0))
        explanation = tree_shap(model, X[0])
        assert explanation.base_value == pytest.approx(y.mean())
        assert all(v == 0.0 for v in explanation.phi.values())
        assert explanation.prediction == pytest.approx(explanation.base_value)

    def test_linearity_over_trees(self):
        model, X = random_model(8, n_trees=6)
        first = GbmModel(model.base_score, model.learning_rate, model.trees[:2], model.feature_names)
        rest = GbmModel(0.0, model.learning_rate, model.trees[2:], model.feature_names)
        np.testing.assert_allclose(
            TreeShapExplainer(model).shap_values(X),
            TreeShapExplainer(first).shap_values(X) + TreeShapExplainer(rest).shap_values(X),
            atol=1e-12,
        )

    def test_missing_cover(self):
        tree = and_tree()
        tree.left.cover = None
        model = GbmModel(base_score=0.0, learning_rate=1.0, trees=[tree], feature_names=["x0", "x1"])
        with pytest.raises(MissingCoverError, match="model lacks cover data"):
            TreeShapExplainer(model)


class TestReports:
    def setup_method(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(25, 3))
        self.frame = pd.DataFrame(X, columns=["ac_660_mean", "sqi_940_median", "age"])
        self.model, _ = train(self.frame, 130 + 8 * X[:, 0] + 2 * X[:, 2], GbmHyperparams(n_trees=20))

    def test_global_importance(self):
        importance = global_importance(self.model, self.frame)
        assert list(importance.columns) == ["feature", "mean_abs_shap"]
        assert importance["feature"].iloc[0] == "ac_660_mean"
        values = importance["mean_abs_shap"].to_numpy()
        assert np.all(values[:-1] >= values[1:])
        expected = np.abs(TreeShapExplainer(self.model).shap_values(self.frame)).mean(axis=0)
        lookup = dict(zip(importance["feature"], importance["mean_abs_shap"]))
        assert lookup["age"] == pytest.approx(expected[2])
        assert top_features(importance, 1) == ["ac_660_mean"]

    def test_importance_ties_break_by_name(self):
        tree = TreeNode(cover=2, value=0.0)
        model = GbmModel(base_score=1.0, learning_rate=1.0, trees=[tree], feature_names=["b", "a"])
        importance = global_importance(model, np.zeros((3, 2)))
        assert importance["feature"].tolist() == ["a", "b"]

    def test_waterfall(self):
        explanation = ShapExplanation(
            base_value=100.0, phi={"a": 2.0, "b": -5.0, "c": 0.0, "d": 2.0}, prediction=99.0
        )
        entries = waterfall_data(explanation)
        assert [e["feature"] for e in entries] == ["base_value", "b", "a", "d"]
        assert [e["cumulative"] for e in entries] == [100.0, 95.0, 97.0, 99.0]

    def test_dependence(self):
        frame = dependence_data(self.model, self.frame, "ac_660_mean")
        assert list(frame.columns) == ["feature_value", "shap_value"]
        assert len(frame) == 25
        assert frame["feature_value"].is_monotonic_increasing
        with pytest.raises(FeatureMismatchError):
            dependence_data(self.model, self.frame, "hb_ref")

    def test_explain_rows_and_json(self, tmp_path):
        explanations = explain_rows(self.model, self.frame.iloc[:2], ["S001", "S002"])
        assert [e.subject_id for e in explanations] == ["S001", "S002"]
        assert all(e.efficiency_gap < 1e-9 for e in explanations)
        explanations[0].to_json(tmp_path / "S001.json")
        payload = json.loads((tmp_path / "S001.json").read_text())
        assert payload["waterfall"][0]["feature"] == "base_value"
        assert set(payload["phi"]) == {"ac_660_mean", "sqi_940_median", "age"}


class TestRollups:
    def setup_method(self):
        self.importance = pd.DataFrame(
            {
                "feature": ["ac_660_mean", "dc_660_median", "mean_ratio_660_730_mean", "sqi_940_mean", "age"],
                "mean_abs_shap": [1.0, 2.0, 3.0, 4.0, 5.0],
            }
        )

    def test_by_category(self):
        rollup = category_importance(self.importance)
        assert list(rollup.columns) == ["group", "mean_abs_shap"]
        assert rollup["group"].tolist() == ["demographic", "quality", "cross_wavelength", "optical"]
        assert rollup["mean_abs_shap"].tolist() == [5.0, 4.0, 3.0, 3.0]

    def test_by_wavelength(self):
        rollup = wavelength_importance(self.importance)
        assert rollup["group"].tolist() == ["demographic", "940", "660", "cross"]
        assert rollup["mean_abs_shap"].sum() == pytest.approx(15.0)
