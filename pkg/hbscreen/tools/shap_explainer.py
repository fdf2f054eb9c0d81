"""Exact Shapley attributions for the boosted ensemble (path-dependent TreeSHAP).

The value function of a feature subset S is the tree's expected output when
features in S follow ``x`` and every other split is averaged over its children
weighted by training cover. Per-tree attributions are combined linearly:
``phi = learning_rate * sum(phi_tree)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel

from ..core.exceptions import FeatureMismatchError, MissingCoverError
from .feature_extraction import feature_category, feature_wavelength
from .gbm_regressor import ArrayLike, GbmModel, TreeNode, align_features, predict

logger = logging.getLogger(__name__)


@dataclass
class PathElement:
    feature: int
    zero_fraction: float
    one_fraction: float
    weight: float


class ShapExplanation(BaseModel):
    base_value: float
    phi: Dict[str, float]
    prediction: float
    subject_id: Optional[str] = None
    feature_values: Dict[str, float] = {}

    @property
    def efficiency_gap(self) -> float:
        return abs(self.base_value + sum(self.phi.values()) - self.prediction)

    def to_json(self, path: Path):
        payload = self.model_dump()
        payload["waterfall"] = waterfall_data(self)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _require_cover(tree: TreeNode, index: int):
    for node in tree.iter_nodes():
        if node.cover is None or node.cover <= 0:
            raise MissingCoverError(f"model lacks cover data (tree {index})")


def expected_value(node: TreeNode) -> float:
    """Cover-weighted mean output of a tree."""
    if node.is_leaf:
        return float(node.value)
    lw, rw = node.left.cover, node.right.cover
    return (expected_value(node.left) * lw + expected_value(node.right) * rw) / (lw + rw)


def _extend(path: List[PathElement], zero_fraction: float, one_fraction: float, feature: int) -> List[PathElement]:
    depth = len(path)
    out = [PathElement(e.feature, e.zero_fraction, e.one_fraction, e.weight) for e in path]
    out.append(PathElement(feature, zero_fraction, one_fraction, 1.0 if depth == 0 else 0.0))
    for i in range(depth - 1, -1, -1):
        out[i + 1].weight += one_fraction * out[i].weight * (i + 1) / (depth + 1)
        out[i].weight = zero_fraction * out[i].weight * (depth - i) / (depth + 1)
    return out


def _unwind(path: List[PathElement], index: int) -> List[PathElement]:
    depth = len(path) - 1
    one_fraction = path[index].one_fraction
    zero_fraction = path[index].zero_fraction
    weights = [e.weight for e in path]
    next_one = weights[depth]
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0:
            tmp = weights[i]
            weights[i] = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - weights[i] * zero_fraction * (depth - i) / (depth + 1)
        else:
            weights[i] = weights[i] * (depth + 1) / (zero_fraction * (depth - i))
    rest = path[:index] + path[index + 1 :]
    return [PathElement(e.feature, e.zero_fraction, e.one_fraction, w) for e, w in zip(rest, weights[:depth])]


def _unwound_sum(path: List[PathElement], index: int) -> float:
    depth = len(path) - 1
    one_fraction = path[index].one_fraction
    zero_fraction = path[index].zero_fraction
    next_one = path[depth].weight
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0:
            tmp = next_one * (depth + 1) / ((i + 1) * one_fraction)
            total += tmp
            next_one = path[i].weight - tmp * zero_fraction * (depth - i) / (depth + 1)
        else:
            total += path[i].weight / zero_fraction / ((depth - i) / (depth + 1))
    return total


def tree_shap_single(tree: TreeNode, x: np.ndarray, n_features: int) -> np.ndarray:
    """Attributions of one tree for one input row."""
    phi = np.zeros(n_features, dtype=float)

    def recurse(node: TreeNode, path: List[PathElement], zero_fraction: float, one_fraction: float, feature: int):
        path = _extend(path, zero_fraction, one_fraction, feature)
        if node.is_leaf:
            for i in range(1, len(path)):
                e = path[i]
                phi[e.feature] += _unwound_sum(path, i) * (e.one_fraction - e.zero_fraction) * node.value
            return
        hot, cold = (node.left, node.right) if x[node.feature_index] <= node.threshold else (node.right, node.left)
        incoming_zero, incoming_one = 1.0, 1.0
        seen = next((i for i, e in enumerate(path) if e.feature == node.feature_index), None)
        if seen is not None:
            incoming_zero, incoming_one = path[seen].zero_fraction, path[seen].one_fraction
            path = _unwind(path, seen)
        recurse(hot, path, hot.cover / node.cover * incoming_zero, incoming_one, node.feature_index)
        recurse(cold, path, cold.cover / node.cover * incoming_zero, 0.0, node.feature_index)

    recurse(tree, [], 1.0, 1.0, -1)
    return phi


class TreeShapExplainer:
    """Explains a GbmModel; checks for cover data once at construction."""

    def __init__(self, model: GbmModel):
        for i, tree in enumerate(model.trees):
            _require_cover(tree, i)
        self.model = model
        self.expected_value = model.base_score + model.learning_rate * sum(expected_value(t) for t in model.trees)

    def shap_values(self, X: ArrayLike) -> np.ndarray:
        X = align_features(self.model, X)
        out = np.zeros((X.shape[0], self.model.n_features), dtype=float)
        for r, row in enumerate(X):
            for tree in self.model.trees:
                out[r] += tree_shap_single(tree, row, self.model.n_features)
        return self.model.learning_rate * out

    def explain(self, x: ArrayLike, subject_id: Optional[str] = None) -> ShapExplanation:
        X = align_features(self.model, x)
        if X.shape[0] != 1:
            raise ValueError(f"explain expects a single row, got {X.shape[0]}")
        phi = self.shap_values(X)[0]
        names = self.model.feature_names
        explanation = ShapExplanation(
            base_value=self.expected_value,
            phi={n: float(v) for n, v in zip(names, phi)},
            prediction=float(predict(self.model, X)[0]),
            subject_id=subject_id,
            feature_values={n: float(v) for n, v in zip(names, X[0])},
        )
        if explanation.efficiency_gap > 1e-9:
            logger.warning("Efficiency gap %.3g for subject %s", explanation.efficiency_gap, subject_id)
        return explanation


def tree_shap(model: GbmModel, x: ArrayLike) -> ShapExplanation:
    return TreeShapExplainer(model).explain(x)


def global_importance(model: GbmModel, X: ArrayLike) -> pd.DataFrame:
    """Mean |phi| per feature, sorted by value descending then name ascending."""
    values = TreeShapExplainer(model).shap_values(X)
    if values.shape[0] == 0:
        raise ValueError("global importance needs at least one row")
    frame = pd.DataFrame({"feature": model.feature_names, "mean_abs_shap": np.abs(values).mean(axis=0)})
    frame = frame.sort_values(["mean_abs_shap", "feature"], ascending=[False, True], kind="mergesort")
    return frame.reset_index(drop=True)


def waterfall_data(explanation: ShapExplanation) -> List[Dict[str, object]]:
    """Base value first, then nonzero contributions by |phi| descending with a running total."""
    entries: List[Dict[str, object]] = [
        {"feature": "base_value", "phi": 0.0, "cumulative": explanation.base_value}
    ]
    running = explanation.base_value
    contributions = sorted(
        ((name, value) for name, value in explanation.phi.items() if value != 0.0),
        key=lambda item: (-abs(item[1]), item[0]),
    )
    for name, value in contributions:
        running += value
        entries.append({"feature": name, "phi": value, "cumulative": running})
    return entries


def dependence_data(model: GbmModel, X: ArrayLike, feature: str) -> pd.DataFrame:
    """(feature value, phi) per row, sorted by value; ties keep row order."""
    if feature not in model.feature_names:
        raise FeatureMismatchError(f"unknown feature {feature!r}")
    matrix = align_features(model, X)
    j = model.feature_names.index(feature)
    phi = TreeShapExplainer(model).shap_values(matrix)[:, j]
    frame = pd.DataFrame({"feature_value": matrix[:, j], "shap_value": phi})
    return frame.sort_values("feature_value", kind="mergesort").reset_index(drop=True)


def _rollup(importance: pd.DataFrame, key) -> pd.DataFrame:
    groups: Dict[str, float] = {}
    for name, value in zip(importance["feature"], importance["mean_abs_shap"]):
        group = key(name)
        groups[group] = groups.get(group, 0.0) + float(value)
    frame = pd.DataFrame({"group": list(groups), "mean_abs_shap": list(groups.values())})
    frame = frame.sort_values(["mean_abs_shap", "group"], ascending=[False, True], kind="mergesort")
    return frame.reset_index(drop=True)


def category_importance(importance: pd.DataFrame) -> pd.DataFrame:
    """Summed mean |phi| per feature category (time, optical, spectral, ...)."""
    return _rollup(importance, feature_category)


def wavelength_importance(importance: pd.DataFrame) -> pd.DataFrame:
    """Summed mean |phi| per wavelength, plus 'cross' and 'demographic'."""
    return _rollup(importance, feature_wavelength)


def top_features(importance: pd.DataFrame, k: int) -> List[str]:
    return importance["feature"].head(k).tolist()


def explain_rows(model: GbmModel, X: ArrayLike, subject_ids: Sequence[str]) -> List[ShapExplanation]:
    explainer = TreeShapExplainer(model)
    matrix = align_features(model, X)
    return [explainer.explain(matrix[i : i + 1], subject_id=sid) for i, sid in enumerate(subject_ids)]
