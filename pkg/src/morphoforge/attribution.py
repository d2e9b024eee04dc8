"""Exact feature attribution for tree ensembles.

Per tree, every root-to-leaf path defines a coalition game over the
distinct features on that path: a known feature follows the instance's
branch (indicator), an unknown one is distributed by training cover
ratios. Shapley values of that game are computed exactly from the
subset-size polynomial of each leaf, then combined across the ensemble
(forest: averaged on probability scale; boosted: summed on the margin
scale before the logistic link).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data_model import Dataset
from .trees import EnsembleModel, ModelError, Tree


@dataclass(frozen=True)
class Attribution:
    feature_names: tuple
    values: np.ndarray
    base_value: float
    output_scale: str

    def output(self) -> float:
        """Reconstructed model output: base_value + sum of contributions."""
        return float(self.base_value + self.values.sum())

    def top(self, k: int = 10) -> list:
        order = np.argsort(-np.abs(self.values), kind="stable")
        return [(self.feature_names[i], float(self.values[i])) for i in order[:k]]


def _subset_weights(m: int) -> np.ndarray:
    fact = [math.factorial(i) for i in range(m + 1)]
    return np.array([fact[k] * fact[m - 1 - k] / fact[m] for k in range(m)])


def _tree_shap_batch(tree: Tree, X: np.ndarray) -> tuple:
    """Contributions of one tree for every row of X.

    Returns (phi matrix of shape X.shape, scalar expected tree output).
    """
    n, d = X.shape
    phi = np.zeros((n, d))
    base = 0.0

    def walk(node: int, path: dict):
        nonlocal base
        f = tree.feature[node]
        if f < 0:
            leaf_value = float(tree.value[node])
            items = list(path.items())
            m = len(items)
            if m == 0:
                base += leaf_value
                return
            r_all = 1.0
            for _, (_, r) in items:
                r_all *= r
            base += leaf_value * r_all
            weights = _subset_weights(m)
            for i, (feat_i, (ind_i, r_i)) in enumerate(items):
                # polynomial in subset size over the other path features
                coeff = np.zeros((m, n))
                coeff[0] = 1.0
                deg = 0
                for j, (_, (ind_j, r_j)) in enumerate(items):
                    if j == i:
                        continue
                    for k in range(deg + 1, 0, -1):
                        coeff[k] = coeff[k] * r_j + coeff[k - 1] * ind_j
                    coeff[0] *= r_j
                    deg += 1
                weighted = weights @ coeff
                phi[:, feat_i] += leaf_value * (ind_i - r_i) * weighted
            return
        parent_cover = tree.cover[node]
        for child, goes in (
            (tree.children_left[node], X[:, f] <= tree.threshold[node]),
            (tree.children_right[node], X[:, f] > tree.threshold[node]),
        ):
            ratio = tree.cover[child] / parent_cover
            branch = dict(path)
            if f in branch:
                prev_ind, prev_r = branch[f]
                branch[f] = (prev_ind * goes.astype(float), prev_r * ratio)
            else:
                branch[f] = (goes.astype(float), ratio)
            walk(int(child), branch)

    walk(0, {})
    return phi, base


def shap_matrix(model: EnsembleModel, X) -> tuple:
    """Attribution matrix (rows align with X) and the shared base value."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(model.feature_names):
        raise ModelError(
            f"feature dimension mismatch: model has {len(model.feature_names)}, input has {X.shape[1]}"
        )
    total = np.zeros_like(X, dtype=float)
    base_sum = 0.0
    for tree in model.trees:
        phi, base = _tree_shap_batch(tree, X)
        total += phi
        base_sum += base
    if model.kind == "forest":
        k = max(len(model.trees), 1)
        return total / k, base_sum / k
    return total, model.base_score + base_sum


def tree_shap(model: EnsembleModel, x) -> Attribution:
    """Exact Shapley attribution of one prediction.

    Forest attributions live on the probability scale; boosted ones on
    the margin (pre-logistic) scale, with base_value + sum(values) equal
    to the raw margin.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    phi, base = shap_matrix(model, x)
    scale = "probability" if model.kind == "forest" else "margin"
    return Attribution(
        feature_names=tuple(model.feature_names),
        values=phi[0],
        base_value=float(base),
        output_scale=scale,
    )


def importance_ranking(model: EnsembleModel, data) -> list:
    """Features ranked by mean |phi| over the dataset, ties in schema order."""
    if isinstance(data, Dataset):
        X = data.feature_matrix()
    else:
        X = np.atleast_2d(np.asarray(data, dtype=float))
    if X.shape[0] == 0:
        raise ModelError("importance_ranking requires a nonempty dataset")
    phi, _ = shap_matrix(model, X)
    mean_abs = np.abs(phi).mean(axis=0)
    order = np.argsort(-mean_abs, kind="stable")
    return [(model.feature_names[i], float(mean_abs[i])) for i in order]


def save_importance_csv(ranking, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "mean_abs_shap", "rank"])
        for rank, (feature, value) in enumerate(ranking, start=1):
            writer.writerow([feature, repr(value), rank])
