"""Least-squares gradient-boosted regression trees for Hb estimation.

Each boosting stage fits a depth-limited regression tree to the current
residuals using exact greedy splits; the ensemble prediction is

    F(x) = base_score + learning_rate * sum(tree(x) for tree in trees)

Every node records its training population (``cover``) so TreeSHAP can weight
unfollowed branches without a background dataset.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from sklearn.metrics import mean_absolute_error, mean_squared_error

from ..core.exceptions import (
    FeatureMismatchError,
    InvalidTrainingDataError,
    MissingInputError,
    ModelFormatError,
)

logger = logging.getLogger(__name__)

MODEL_FORMAT = "hbscreen-gbm"
MODEL_FORMAT_VERSION = 1
_TRACE_LOG_EVERY = 25
_MIN_RELATIVE_GAIN = 1e-12

ArrayLike = Union[np.ndarray, pd.DataFrame, Sequence[Sequence[float]]]


class GbmHyperparams(BaseModel):
    n_trees: int = Field(200, ge=0)
    learning_rate: float = Field(0.05, gt=0.0, le=1.0)
    max_depth: int = Field(3, ge=1)
    min_samples_leaf: int = Field(2, ge=1)
    seed: int = 42  # no subsampling yet; kept so model files record the run seed


@dataclass
class TreeNode:
    """Internal node (feature_index/threshold/children) or leaf (value)."""

    cover: Optional[int] = None
    value: Optional[float] = None
    feature_index: Optional[int] = None
    threshold: Optional[float] = None
    split_gain: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature_index is None

    def predict_one(self, x: np.ndarray) -> float:
        node = self
        while not node.is_leaf:
            node = node.left if x[node.feature_index] <= node.threshold else node.right
        return float(node.value)

    def iter_nodes(self) -> Iterator["TreeNode"]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.extend((node.right, node.left))

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())


@dataclass
class GbmModel:
    base_score: float
    learning_rate: float
    trees: List[TreeNode]
    feature_names: List[str]
    hyperparams: GbmHyperparams = field(default_factory=GbmHyperparams)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def used_features(self) -> List[int]:
        return sorted({n.feature_index for t in self.trees for n in t.iter_nodes() if not n.is_leaf})


class RegressionMetrics(BaseModel):
    mae: float
    rmse: float
    r2: Optional[float] = None
    n: int


@dataclass
class SplitEvaluation:
    train: RegressionMetrics
    test: RegressionMetrics
    scatter: pd.DataFrame  # hb_ref, hb_pred, split


# Training


def _validate_training_data(X: np.ndarray, y: np.ndarray, min_samples_leaf: int):
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise InvalidTrainingDataError(f"empty training matrix (shape {X.shape})")
    if y.shape != (X.shape[0],):
        raise InvalidTrainingDataError(f"target length {y.shape[0]} does not match {X.shape[0]} rows")
    if not np.all(np.isfinite(X)):
        raise InvalidTrainingDataError("training matrix contains missing or non-finite values")
    if not np.all(np.isfinite(y)):
        raise InvalidTrainingDataError("targets contain missing or non-finite values")
    if X.shape[0] < 2 * min_samples_leaf:
        raise InvalidTrainingDataError(
            f"need at least {2 * min_samples_leaf} samples for min_samples_leaf={min_samples_leaf}, got {X.shape[0]}"
        )


def _best_split(X: np.ndarray, r: np.ndarray, min_samples_leaf: int) -> Optional[Tuple[int, float, float]]:
    """Exact greedy SSE-reduction split; ties keep the lowest feature, then the lowest threshold."""
    n, p = X.shape
    total = float(np.sum(r))
    parent = total * total / n
    min_gain = _MIN_RELATIVE_GAIN * max(1.0, float(np.sum(r * r)))
    positions = np.arange(min_samples_leaf, n - min_samples_leaf + 1)
    if positions.size == 0:
        return None
    best: Optional[Tuple[int, float, float]] = None
    for f in range(p):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        prefix = np.cumsum(r[order])
        cut = positions[xs[positions - 1] < xs[positions]]
        if cut.size == 0:
            continue
        left_sum = prefix[cut - 1]
        right_sum = total - left_sum
        gains = left_sum * left_sum / cut + right_sum * right_sum / (n - cut) - parent
        k = int(np.argmax(gains))
        gain = float(gains[k])
        if gain <= min_gain or (best is not None and gain <= best[2]):
            continue
        lo, hi = xs[cut[k] - 1], xs[cut[k]]
        threshold = float(lo + (hi - lo) / 2.0)
        if threshold >= hi:
            threshold = float(lo)
        best = (f, threshold, gain)
    return best


def _build_tree(X: np.ndarray, r: np.ndarray, idx: np.ndarray, depth: int, params: GbmHyperparams) -> TreeNode:
    n = len(idx)
    if depth < params.max_depth and n >= 2 * params.min_samples_leaf:
        split = _best_split(X[idx], r[idx], params.min_samples_leaf)
        if split is not None:
            f, threshold, gain = split
            go_left = X[idx, f] <= threshold
            return TreeNode(
                cover=n,
                feature_index=f,
                threshold=threshold,
                split_gain=gain,
                left=_build_tree(X, r, idx[go_left], depth + 1, params),
                right=_build_tree(X, r, idx[~go_left], depth + 1, params),
            )
    return TreeNode(cover=n, value=float(np.mean(r[idx])))


def _tree_outputs(tree: TreeNode, X: np.ndarray) -> np.ndarray:
    return np.array([tree.predict_one(row) for row in X], dtype=float)


def _rmse(residuals: np.ndarray) -> float:
    return math.sqrt(float(np.mean(residuals * residuals)))


def train(
    X: ArrayLike,
    y: Sequence[float],
    hyperparams: Optional[GbmHyperparams] = None,
    feature_names: Optional[Sequence[str]] = None,
) -> Tuple[GbmModel, List[float]]:
    """Fit the ensemble; returns the model and the training RMSE after 0..n_trees stages."""
    params = hyperparams or GbmHyperparams()
    if isinstance(X, pd.DataFrame):
        feature_names = list(feature_names or X.columns)
        X = X.to_numpy(dtype=float)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    _validate_training_data(X, y, params.min_samples_leaf)
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise FeatureMismatchError(f"{len(names)} feature names for {X.shape[1]} columns")

    # constant targets reproduce exactly
    base_score = float(y[0]) if np.all(y == y[0]) else float(np.mean(y))
    accumulated = np.zeros_like(y)
    idx = np.arange(len(y))
    trees: List[TreeNode] = []
    trace = [_rmse(y - base_score)]
    for m in range(params.n_trees):
        residuals = y - (base_score + params.learning_rate * accumulated)
        tree = _build_tree(X, residuals, idx, 0, params)
        accumulated = accumulated + _tree_outputs(tree, X)
        trees.append(tree)
        trace.append(_rmse(y - (base_score + params.learning_rate * accumulated)))
        if (m + 1) % _TRACE_LOG_EVERY == 0:
            logger.debug("tree %d: training RMSE %.6f", m + 1, trace[-1])
    logger.info(
        "Trained %d trees on %d x %d (lr=%s, depth=%d): RMSE %.4f -> %.4f",
        params.n_trees, X.shape[0], X.shape[1], params.learning_rate, params.max_depth, trace[0], trace[-1],
    )
    model = GbmModel(
        base_score=base_score,
        learning_rate=params.learning_rate,
        trees=trees,
        feature_names=names,
        hyperparams=params,
    )
    return model, trace


# Prediction


def align_features(model: GbmModel, X: ArrayLike) -> np.ndarray:
    """Matrix with the model's column order; mismatches name the offending features."""
    if isinstance(X, pd.DataFrame):
        columns = [str(c) for c in X.columns]
        missing = [n for n in model.feature_names if n not in columns]
        extra = [c for c in columns if c not in model.feature_names]
        if missing or extra:
            raise FeatureMismatchError(f"feature mismatch: missing {missing}, extra {extra}")
        return X[model.feature_names].to_numpy(dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != model.n_features:
        missing = model.feature_names[X.shape[1]:]
        raise FeatureMismatchError(
            f"feature mismatch: got {X.shape[1]} columns, model expects {model.n_features}"
            + (f" (missing {missing})" if missing else f" ({X.shape[1] - model.n_features} extra)")
        )
    return X


def predict(model: GbmModel, X: ArrayLike) -> np.ndarray:
    X = align_features(model, X)
    accumulated = np.zeros(X.shape[0], dtype=float)
    for tree in model.trees:
        accumulated = accumulated + _tree_outputs(tree, X)
    return model.base_score + model.learning_rate * accumulated


# Evaluation


def evaluate(y_pred: Sequence[float], y_true: Sequence[float]) -> RegressionMetrics:
    y_pred = np.asarray(y_pred, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    if y_pred.shape != y_true.shape:
        raise ValueError(f"length mismatch: {y_pred.shape[0]} predictions vs {y_true.shape[0]} references")
    if y_true.size < 2:
        raise ValueError("evaluation needs at least two samples")
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    sse = float(np.sum((y_pred - y_true) ** 2))
    return RegressionMetrics(
        mae=float(mean_absolute_error(y_true, y_pred)),
        rmse=math.sqrt(float(mean_squared_error(y_true, y_pred))),
        r2=None if ss_tot == 0.0 else 1.0 - sse / ss_tot,
        n=int(y_true.size),
    )


def evaluate_split(
    model: GbmModel,
    X_train: ArrayLike,
    y_train: Sequence[float],
    X_test: ArrayLike,
    y_test: Sequence[float],
) -> SplitEvaluation:
    """Train and test metrics plus the predicted-vs-reference scatter rows."""
    pred_train = predict(model, X_train)
    pred_test = predict(model, X_test)
    scatter = pd.concat(
        [
            pd.DataFrame({"hb_ref": np.asarray(y_train, dtype=float), "hb_pred": pred_train, "split": "train"}),
            pd.DataFrame({"hb_ref": np.asarray(y_test, dtype=float), "hb_pred": pred_test, "split": "test"}),
        ],
        ignore_index=True,
    )
    return SplitEvaluation(
        train=evaluate(pred_train, y_train),
        test=evaluate(pred_test, y_test),
        scatter=scatter,
    )


def gain_importance(model: GbmModel) -> Dict[str, float]:
    """Total split gain per feature; unused features map to 0."""
    totals = {name: 0.0 for name in model.feature_names}
    for tree in model.trees:
        for node in tree.iter_nodes():
            if not node.is_leaf:
                totals[model.feature_names[node.feature_index]] += node.split_gain
    return totals


def repeated_split_summary(
    vectors,
    seeds: Sequence[int],
    hyperparams: Optional[GbmHyperparams] = None,
    test_fraction: float = 0.2,
) -> Dict[str, Any]:
    """Test metrics over several split seeds: mean and sample SD per metric."""
    from .dataset_service import split_subjects

    names = vectors.feature_names
    per_seed = []
    for seed in seeds:
        split = split_subjects(vectors, test_fraction=test_fraction, seed=seed)
        train_set, test_set = vectors.subset(split.train), vectors.subset(split.test)
        model, _ = train(train_set.matrix(names), train_set.targets(), hyperparams, names)
        if len(test_set.subject_ids) < 2:
            logger.warning("Split seed %d has %d test subject(s); metrics left out", seed, len(test_set.subject_ids))
            per_seed.append({"seed": int(seed), "mae": None, "rmse": None, "r2": None, "n": len(test_set.subject_ids)})
            continue
        metrics = evaluate(predict(model, test_set.matrix(names)), test_set.targets())
        per_seed.append({"seed": int(seed), **metrics.model_dump()})

    summary: Dict[str, Any] = {"n_repeats": len(per_seed), "runs": per_seed}
    for key in ("mae", "rmse", "r2"):
        values = np.array([r[key] for r in per_seed if r[key] is not None], dtype=float)
        summary[f"test_{key}_mean"] = float(values.mean()) if values.size else None
        summary[f"test_{key}_sd"] = float(values.std(ddof=1)) if values.size > 1 else None
    return summary


# Persistence


def _node_to_json(node: TreeNode) -> Dict[str, Any]:
    if node.is_leaf:
        return {"value": node.value, "cover": node.cover}
    return {
        "feature": node.feature_index,
        "threshold": node.threshold,
        "gain": node.split_gain,
        "cover": node.cover,
        "left": _node_to_json(node.left),
        "right": _node_to_json(node.right),
    }


def model_to_json(model: GbmModel) -> str:
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "feature_names": model.feature_names,
        "hyperparams": model.hyperparams.model_dump(),
        "trees": [_node_to_json(t) for t in model.trees],
    }
    return json.dumps(payload, sort_keys=True)


def save_model(model: GbmModel, path: Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(model_to_json(model), encoding="utf-8")


def _number(obj: Dict[str, Any], key: str, where: str) -> float:
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ModelFormatError(f"expected number for '{key}'", f"{where}.{key}")
    return float(value)


def _cover(obj: Dict[str, Any], where: str) -> Optional[int]:
    cover = obj.get("cover")
    if cover is None:
        return None
    if isinstance(cover, bool) or not isinstance(cover, int) or cover < 0:
        raise ModelFormatError("cover must be a nonnegative integer", f"{where}.cover")
    return cover


def _node_from_json(obj: Any, where: str, n_features: int) -> TreeNode:
    if not isinstance(obj, dict):
        raise ModelFormatError("tree node must be an object", where)
    if "value" in obj:
        return TreeNode(cover=_cover(obj, where), value=_number(obj, "value", where))
    if not all(k in obj for k in ("feature", "threshold", "left", "right")):
        raise ModelFormatError("node is neither a leaf nor a complete split", where)
    feature = obj["feature"]
    if isinstance(feature, bool) or not isinstance(feature, int) or not 0 <= feature < n_features:
        raise ModelFormatError(f"feature index must be in [0, {n_features})", f"{where}.feature")
    gain = _number(obj, "gain", where) if "gain" in obj else 0.0
    if gain < 0:
        raise ModelFormatError("split gain must be nonnegative", f"{where}.gain")
    return TreeNode(
        cover=_cover(obj, where),
        feature_index=feature,
        threshold=_number(obj, "threshold", where),
        split_gain=gain,
        left=_node_from_json(obj["left"], f"{where}.left", n_features),
        right=_node_from_json(obj["right"], f"{where}.right", n_features),
    )


def model_from_json(text: str) -> GbmModel:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"model file is not valid JSON: {e.msg}", f"line {e.lineno} column {e.colno}") from e
    if not isinstance(payload, dict):
        raise ModelFormatError("model file must contain a JSON object", "<root>")
    if payload.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"not a {MODEL_FORMAT} model file", "format")
    if payload.get("version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model version {payload.get('version')!r}; expected version {MODEL_FORMAT_VERSION}",
            "version",
        )
    names = payload.get("feature_names")
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise ModelFormatError("feature_names must be a list of strings", "feature_names")
    trees = payload.get("trees")
    if not isinstance(trees, list):
        raise ModelFormatError("trees must be a list", "trees")
    try:
        hyperparams = GbmHyperparams.model_validate(payload.get("hyperparams") or {})
    except ValueError as e:
        raise ModelFormatError(f"invalid hyperparams: {e}", "hyperparams") from e
    return GbmModel(
        base_score=_number(payload, "base_score", "<root>"),
        learning_rate=_number(payload, "learning_rate", "<root>"),
        trees=[_node_from_json(t, f"trees[{i}]", len(names)) for i, t in enumerate(trees)],
        feature_names=names,
        hyperparams=hyperparams,
    )


def load_model(path: Path) -> GbmModel:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"model file not found: {path}")
    return model_from_json(path.read_text(encoding="utf-8"))


class GbmRegressor:
    """Estimator-style wrapper: ``fit`` / ``predict`` over the functional core."""

    def __init__(self, hyperparams: Optional[GbmHyperparams] = None):
        self.hyperparams = hyperparams or GbmHyperparams()
        self.model_: Optional[GbmModel] = None
        self.train_trace_: List[float] = []

    def fit(self, X: ArrayLike, y: Sequence[float], feature_names: Optional[Sequence[str]] = None) -> "GbmRegressor":
        self.model_, self.train_trace_ = train(X, y, self.hyperparams, feature_names)
        return self

    def predict(self, X: ArrayLike) -> np.ndarray:
        if self.model_ is None:
            raise RuntimeError("GbmRegressor is not fitted")
        return predict(self.model_, X)

    def __str__(self) -> str:
        return "Gradient Boosting Regressor"
