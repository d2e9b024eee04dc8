"""Native CART trees plus bagged and boosted ensembles for binary tasks.

Trees are grown best-first on axis-aligned threshold splits (x <= t goes
left). CART/forest trees split on Gini impurity reduction; boosted trees
use the second-order logistic-loss gain with an L2 leaf penalty. Every
fit is a deterministic function of (data, params, seed): per-tree and
per-fold generators are derived as default_rng((seed, index)) so serial
and parallel execution give identical models.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class TreeParams:
    max_depth: int | None = None
    min_samples_leaf: int = 1
    max_leaf_nodes: int | None = None
    max_features: float | int | None = None

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 0:
            raise ModelError("max_depth must be >= 0 or None")
        if self.min_samples_leaf < 1:
            raise ModelError("min_samples_leaf must be >= 1")
        if self.max_leaf_nodes is not None and self.max_leaf_nodes < 1:
            raise ModelError("max_leaf_nodes must be >= 1 or None")


@dataclass(frozen=True)
class ForestParams:
    n_estimators: int = 100
    tree: TreeParams = field(default_factory=TreeParams)
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ModelError("n_estimators must be >= 1")


@dataclass(frozen=True)
class BoostParams:
    n_estimators: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    gamma: float = 0.0
    colsample_bytree: float = 1.0
    reg_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 0:
            raise ModelError("n_estimators must be >= 0")
        if self.learning_rate <= 0:
            raise ModelError("learning_rate must be > 0")
        if not 0.0 < self.colsample_bytree <= 1.0:
            raise ModelError("colsample_bytree must be in (0, 1]")
        if self.gamma < 0:
            raise ModelError("gamma must be >= 0")
        if self.reg_lambda < 0:
            raise ModelError("reg_lambda must be >= 0")


@dataclass
class Tree:
    """Array-encoded binary tree; feature[i] == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    children_left: np.ndarray
    children_right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    def leaf_index(self, x: np.ndarray) -> int:
        node = 0
        while self.feature[node] >= 0:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.children_left[node]
            else:
                node = self.children_right[node]
        return node

    def predict_value(self, x: np.ndarray) -> float:
        return float(self.value[self.leaf_index(x)])

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass
class EnsembleModel:
    kind: str
    trees: tuple
    feature_names: tuple
    threshold: float = 0.5
    base_score: float = 0.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("forest", "boosted"):
            raise ModelError(f"unknown ensemble kind {self.kind!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ModelError("decision threshold must lie in (0, 1)")


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float


def _flat_seed(*parts) -> tuple:
    """Flatten nested seed parts into the entropy tuple default_rng accepts."""
    out = []
    for p in parts:
        if isinstance(p, (tuple, list)):
            out.extend(int(v) for v in p)
        else:
            out.append(int(p))
    return tuple(out)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _logit(p: float) -> float:
    p = min(max(p, 1e-6), 1.0 - 1e-6)
    return math.log(p / (1.0 - p))


def _resolve_feature_count(max_features, n_features: int) -> int:
    """None -> all; int -> that many; float fraction -> floor, minimum 1."""
    if max_features is None:
        return n_features
    if isinstance(max_features, (int, np.integer)) and not isinstance(max_features, bool):
        k = int(max_features)
    elif isinstance(max_features, float):
        if not 0.0 < max_features <= 1.0:
            raise ModelError("max_features fraction must be in (0, 1]")
        k = int(max_features * n_features)
    else:
        raise ModelError(f"unsupported max_features {max_features!r}")
    return min(max(k, 1), n_features)


class _Builder:
    """Best-first growth shared by the Gini and gradient criteria.

    With no leaf budget this expands exactly the greedy depth-first tree;
    max_leaf_nodes caps leaves by applying the highest-priority splits
    first (FIFO among equal priorities, so growth stays deterministic).
    """

    def __init__(self, X, leaf_value, find_split, max_depth, min_samples_leaf, max_leaf_nodes):
        self.X = X
        self.leaf_value = leaf_value
        self.find_split = find_split
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_leaf_nodes = max_leaf_nodes

    def build(self, indices: np.ndarray) -> Tree:
        feature, threshold, left, right, value, cover = [], [], [], [], [], []

        def new_node(idx) -> int:
            nid = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(self.leaf_value(idx))
            cover.append(float(idx.size))
            return nid

        heap = []
        tick = itertools.count()

        def consider(nid, idx, depth):
            if self.max_depth is not None and depth >= self.max_depth:
                return
            if idx.size < max(2, 2 * self.min_samples_leaf):
                return
            found = self.find_split(idx)
            if found is not None:
                heapq.heappush(heap, (-found[0], next(tick), nid, depth, found))

        root_idx = np.asarray(indices)
        consider(new_node(root_idx), root_idx, 0)
        n_leaves = 1
        while heap and (self.max_leaf_nodes is None or n_leaves < self.max_leaf_nodes):
            _, _, nid, depth, (gain, f, thr, idx_l, idx_r) = heapq.heappop(heap)
            lid = new_node(idx_l)
            rid = new_node(idx_r)
            feature[nid], threshold[nid] = f, thr
            left[nid], right[nid] = lid, rid
            n_leaves += 1
            consider(lid, idx_l, depth + 1)
            consider(rid, idx_r, depth + 1)

        return Tree(
            feature=np.array(feature, dtype=np.int32),
            threshold=np.array(threshold, dtype=float),
            children_left=np.array(left, dtype=np.int32),
            children_right=np.array(right, dtype=np.int32),
            value=np.array(value, dtype=float),
            cover=np.array(cover, dtype=float),
        )


def _candidate_features(rng, n_features: int, k: int) -> np.ndarray:
    if k >= n_features:
        return np.arange(n_features)
    return np.sort(rng.choice(n_features, size=k, replace=False))


def _gini_split_finder(X, y01, params: TreeParams, rng, n_root: int):
    n_features = X.shape[1]
    k = _resolve_feature_count(params.max_features, n_features)
    msl = params.min_samples_leaf

    def find_split(idx):
        n = idx.size
        ysub = y01[idx]
        total_pos = float(ysub.sum())
        if total_pos == 0.0 or total_pos == n:
            return None
        parent = 1.0 - (total_pos / n) ** 2 - (1.0 - total_pos / n) ** 2
        best = None
        for f in _candidate_features(rng, n_features, k):
            xcol = X[idx, f]
            order = np.argsort(xcol, kind="stable")
            xs = xcol[order]
            if xs[0] == xs[-1]:
                continue
            pos_l = np.cumsum(ysub[order])[:-1]
            n_l = np.arange(1, n, dtype=float)
            n_r = n - n_l
            valid = xs[1:] != xs[:-1]
            if msl > 1:
                valid &= (n_l >= msl) & (n_r >= msl)
            if not valid.any():
                continue
            p_l = pos_l / n_l
            p_r = (total_pos - pos_l) / n_r
            child = n_l * (1.0 - p_l**2 - (1.0 - p_l) ** 2) + n_r * (1.0 - p_r**2 - (1.0 - p_r) ** 2)
            reduction = np.where(valid, parent - child / n, -np.inf)
            i = int(np.argmax(reduction))
            if best is None or reduction[i] > best[0]:
                best = (float(reduction[i]), int(f), 0.5 * (xs[i] + xs[i + 1]))
        if best is None or best[0] <= 1e-12:
            return None
        reduction, f, thr = best
        mask = X[idx, f] <= thr
        priority = reduction * n / n_root
        return (priority, f, thr, idx[mask], idx[~mask])

    return find_split


def fit_tree(X, y, params: TreeParams = TreeParams(), seed=0) -> Tree:
    """Grow a single CART tree; leaves hold the positive-class fraction.

    Splits maximize Gini impurity reduction over all (feature, midpoint
    threshold) candidates; zero-gain splits are never taken. `seed` only
    matters when max_features requests per-split candidate sampling.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ModelError("fit_tree requires a nonempty 2-D feature matrix")
    if X.shape[0] != y.shape[0]:
        raise ModelError("X and y row counts differ")
    y01 = y.astype(float)
    rng = np.random.default_rng(_flat_seed(seed))
    find_split = _gini_split_finder(X, y01, params, rng, X.shape[0])

    def leaf_value(idx):
        return float(y01[idx].mean())

    builder = _Builder(X, leaf_value, find_split, params.max_depth, params.min_samples_leaf, params.max_leaf_nodes)
    return builder.build(np.arange(X.shape[0]))


def fit_forest(X, y, params: ForestParams = ForestParams()) -> EnsembleModel:
    """Bagged CART forest; predicted probability is the mean over trees."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ModelError("fit_forest requires a nonempty 2-D feature matrix")
    if X.shape[0] != y.shape[0]:
        raise ModelError("X and y row counts differ")
    n = X.shape[0]
    y01 = y.astype(float)
    trees = []
    for t in range(params.n_estimators):
        rng = np.random.default_rng(_flat_seed(params.seed, t))
        idx = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        find_split = _gini_split_finder(X, y01, params.tree, rng, n)

        def leaf_value(i):
            return float(y01[i].mean())

        builder = _Builder(
            X, leaf_value, find_split, params.tree.max_depth, params.tree.min_samples_leaf, params.tree.max_leaf_nodes
        )
        trees.append(builder.build(np.asarray(idx)))
    return EnsembleModel(
        kind="forest",
        trees=tuple(trees),
        feature_names=tuple(f"x{i}" for i in range(X.shape[1])),
        params=_params_dict("forest", params),
    )


def _boost_split_finder(X, g, h, feature_subset, gamma, lam):
    def find_split(idx):
        g_sub = g[idx]
        h_sub = h[idx]
        g_tot = float(g_sub.sum())
        h_tot = float(h_sub.sum())
        parent_score = g_tot * g_tot / (h_tot + lam)
        best = None
        for f in feature_subset:
            xcol = X[idx, f]
            order = np.argsort(xcol, kind="stable")
            xs = xcol[order]
            if xs[0] == xs[-1]:
                continue
            gl = np.cumsum(g_sub[order])[:-1]
            hl = np.cumsum(h_sub[order])[:-1]
            gr = g_tot - gl
            hr = h_tot - hl
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent_score)
            valid = xs[1:] != xs[:-1]
            gain = np.where(valid, gain, -np.inf)
            i = int(np.argmax(gain))
            if math.isfinite(gain[i]) and (best is None or gain[i] > best[0]):
                best = (float(gain[i]), int(f), 0.5 * (xs[i] + xs[i + 1]))
        # tolerance keeps mathematically-zero gains (float noise ~1e-33)
        # acceptable when gamma == 0
        if best is None or best[0] < gamma - 1e-12:
            return None
        gain, f, thr = best
        mask = X[idx, f] <= thr
        return (gain, f, thr, idx[mask], idx[~mask])

    return find_split


def fit_boosted(X, y, params: BoostParams = BoostParams()) -> EnsembleModel:
    """Second-order gradient boosting on the logistic loss.

    Each round fits a regression tree to (gradient, hessian) statistics;
    a split is taken iff its gain is at least gamma, leaves carry
    -learning_rate * G / (H + lambda), and the model margin starts at the
    logit of the class prior.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ModelError("fit_boosted requires a nonempty 2-D feature matrix")
    if X.shape[0] != y.shape[0]:
        raise ModelError("X and y row counts differ")
    y01 = y.astype(float)
    n, n_features = X.shape
    base = _logit(float(y01.mean()))
    margins = np.full(n, base)
    k = max(1, int(math.ceil(params.colsample_bytree * n_features - 1e-9)))
    trees = []
    for t in range(params.n_estimators):
        rng = np.random.default_rng(_flat_seed(params.seed, t))
        subset = _candidate_features(rng, n_features, min(k, n_features))
        p = _sigmoid(margins)
        g = p - y01
        h = p * (1.0 - p)
        lr, lam = params.learning_rate, params.reg_lambda

        def leaf_value(idx):
            return float(-lr * g[idx].sum() / (h[idx].sum() + lam))

        find_split = _boost_split_finder(X, g, h, subset, params.gamma, lam)
        builder = _Builder(X, leaf_value, find_split, params.max_depth, 1, None)
        tree = builder.build(np.arange(n))
        trees.append(tree)
        margins += np.array([tree.predict_value(X[i]) for i in range(n)])
    return EnsembleModel(
        kind="boosted",
        trees=tuple(trees),
        feature_names=tuple(f"x{i}" for i in range(n_features)),
        base_score=base,
        params=_params_dict("boosted", params),
    )


def predict_proba(model: EnsembleModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(model.feature_names):
        raise ModelError(
            f"feature dimension mismatch: model has {len(model.feature_names)}, input has {X.shape[1]}"
        )
    if model.kind == "forest":
        per_tree = np.array([[t.predict_value(x) for t in model.trees] for x in X])
        return per_tree.mean(axis=1)
    margins = model.base_score + np.array([sum(t.predict_value(x) for t in model.trees) for x in X])
    return _sigmoid(margins)


def predict(model: EnsembleModel, x) -> tuple:
    """Probability and thresholded decision for one record vector."""
    prob = float(predict_proba(model, np.asarray(x, dtype=float).reshape(1, -1))[0])
    return prob, prob >= model.threshold


def binary_metrics(y_true, y_pred) -> Metrics:
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(accuracy=accuracy, precision=precision, recall=recall, f1=f1)


def evaluate(model: EnsembleModel, X_test, y_test) -> Metrics:
    X_test = np.asarray(X_test, dtype=float)
    if X_test.shape[0] == 0:
        raise ModelError("evaluate requires a nonempty test set")
    probs = predict_proba(model, X_test)
    return binary_metrics(y_test, probs >= model.threshold)


def threshold_from_scores(probs, y_true) -> float:
    """Probability cut balancing precision against recall.

    Candidates are the unique scores; the winner minimizes
    |precision - recall|, breaking ties toward higher F1 and then the
    lower threshold. The result is clamped into the open interval (0, 1).
    """
    y_true = np.asarray(y_true, dtype=bool)
    if y_true.all() or not y_true.any():
        raise ModelError("threshold tuning requires both classes in the validation set")
    probs = np.asarray(probs, dtype=float)
    best = None
    for t in np.unique(probs):
        m = binary_metrics(y_true, probs >= t)
        key = (abs(m.precision - m.recall), -m.f1, t)
        if best is None or key < best[0]:
            best = (key, float(t))
    return min(max(best[1], 1e-9), 1.0 - 1e-9)


def tune_threshold(model: EnsembleModel, X_val, y_val) -> float:
    """threshold_from_scores applied to the model's validation scores."""
    return threshold_from_scores(predict_proba(model, X_val), y_val)


def stratified_kfold(y, k: int, seed=0) -> list:
    """Deterministic stratified folds; positive counts differ by <= 1."""
    y = np.asarray(y, dtype=bool)
    n = y.shape[0]
    if k < 2:
        raise ModelError("k must be >= 2")
    if n < k:
        raise ModelError("need at least k samples")
    rng = np.random.default_rng(_flat_seed(seed))
    pos = np.flatnonzero(y)
    neg = np.flatnonzero(~y)
    rng.shuffle(pos)
    rng.shuffle(neg)
    folds = [[] for _ in range(k)]
    for rank, i in enumerate(pos):
        folds[rank % k].append(int(i))
    for rank, i in enumerate(neg):
        folds[(rank + len(pos)) % k].append(int(i))
    return [np.array(sorted(f), dtype=int) for f in folds]


def _params_dict(model_kind: str, params) -> dict:
    if model_kind == "forest":
        return {
            "model": "forest",
            "n_estimators": params.n_estimators,
            "bootstrap": params.bootstrap,
            "seed": params.seed,
            "max_depth": params.tree.max_depth,
            "min_samples_leaf": params.tree.min_samples_leaf,
            "max_leaf_nodes": params.tree.max_leaf_nodes,
            "max_features": params.tree.max_features,
        }
    return {
        "model": "boosted",
        "n_estimators": params.n_estimators,
        "learning_rate": params.learning_rate,
        "max_depth": params.max_depth,
        "gamma": params.gamma,
        "colsample_bytree": params.colsample_bytree,
        "reg_lambda": params.reg_lambda,
        "seed": params.seed,
    }


def make_params(model_kind: str, combo: dict, seed=0):
    """Build ForestParams/BoostParams from a flat grid-cell dict."""
    combo = dict(combo)
    if model_kind == "forest":
        tree = TreeParams(
            max_depth=combo.pop("max_depth", None),
            min_samples_leaf=combo.pop("min_samples_leaf", 1),
            max_leaf_nodes=combo.pop("max_leaf_nodes", None),
            max_features=combo.pop("max_features", None),
        )
        params = ForestParams(
            n_estimators=combo.pop("n_estimators", 100),
            bootstrap=combo.pop("bootstrap", True),
            tree=tree,
            seed=combo.pop("seed", seed),
        )
        if combo:
            raise ModelError(f"unknown forest parameters {sorted(combo)}")
        return params
    if model_kind == "boosted":
        try:
            return BoostParams(seed=combo.pop("seed", seed), **combo)
        except TypeError:
            raise ModelError(f"unknown boosted parameters {sorted(combo)}") from None
    raise ModelError(f"unknown model kind {model_kind!r}")


def fit_model(model_kind: str, X, y, params):
    if model_kind == "forest":
        return fit_forest(X, y, params)
    if model_kind == "boosted":
        return fit_boosted(X, y, params)
    raise ModelError(f"unknown model kind {model_kind!r}")


@dataclass
class GridSearchResult:
    model_kind: str
    best_params: dict
    best_score: float
    table: list
    k: int
    seed: int


def grid_search_cv(X, y, grid: dict, k: int = 5, seed=0, model_kind: str = "forest") -> GridSearchResult:
    """Exhaustive lattice search scored by mean validation F1 over k folds.

    Folds are stratified once per search. A validation fold holding a
    single class is flagged and scored by accuracy instead of F1. Ties
    keep the first cell in lattice iteration order.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=bool)
    if not grid:
        raise ModelError("grid must be nonempty")
    folds = stratified_kfold(y, k, seed)
    all_idx = np.arange(X.shape[0])
    names = list(grid.keys())
    table = []
    best = None
    for cell, values in enumerate(itertools.product(*(grid[n] for n in names))):
        combo = dict(zip(names, values))
        fold_scores = []
        flagged = []
        for fi, val_idx in enumerate(folds):
            train_idx = np.setdiff1d(all_idx, val_idx)
            params = make_params(model_kind, combo, seed=(seed, cell, fi))
            fitted = fit_model(model_kind, X[train_idx], y[train_idx], params)
            probs = predict_proba(fitted, X[val_idx])
            m = binary_metrics(y[val_idx], probs >= 0.5)
            single_class = bool(y[val_idx].all() or not y[val_idx].any())
            if single_class:
                flagged.append(fi)
                fold_scores.append(m.accuracy)
            else:
                fold_scores.append(m.f1)
        mean_score = float(np.mean(fold_scores))
        table.append(
            {"params": combo, "fold_scores": fold_scores, "mean_score": mean_score, "flagged_folds": flagged}
        )
        if best is None or mean_score > best[0]:
            best = (mean_score, combo)
    return GridSearchResult(
        model_kind=model_kind, best_params=best[1], best_score=best[0], table=table, k=k, seed=seed
    )


def _tree_to_dict(tree: Tree) -> dict:
    return {
        "feature": tree.feature.tolist(),
        "threshold": tree.threshold.tolist(),
        "children_left": tree.children_left.tolist(),
        "children_right": tree.children_right.tolist(),
        "value": tree.value.tolist(),
        "cover": tree.cover.tolist(),
    }


def _tree_from_dict(d: dict) -> Tree:
    return Tree(
        feature=np.array(d["feature"], dtype=np.int32),
        threshold=np.array(d["threshold"], dtype=float),
        children_left=np.array(d["children_left"], dtype=np.int32),
        children_right=np.array(d["children_right"], dtype=np.int32),
        value=np.array(d["value"], dtype=float),
        cover=np.array(d["cover"], dtype=float),
    )


def model_to_dict(model: EnsembleModel) -> dict:
    return {
        "kind": model.kind,
        "feature_names": list(model.feature_names),
        "threshold": model.threshold,
        "base_score": model.base_score,
        "params": model.params,
        "trees": [_tree_to_dict(t) for t in model.trees],
    }


def model_from_dict(d: dict) -> EnsembleModel:
    return EnsembleModel(
        kind=d["kind"],
        trees=tuple(_tree_from_dict(t) for t in d["trees"]),
        feature_names=tuple(d["feature_names"]),
        threshold=d["threshold"],
        base_score=d.get("base_score", 0.0),
        params=d.get("params", {}),
    )


def save_model(model: EnsembleModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2)


def load_model(path) -> EnsembleModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
