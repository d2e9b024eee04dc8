import itertools
import math

import numpy as np
import pytest

from morphoforge.attribution import (
    Attribution,
    importance_ranking,
    save_importance_csv,
    shap_matrix,
    tree_shap,
)
from morphoforge.trees import (
    BoostParams,
    ForestParams,
    ModelError,
    TreeParams,
    fit_boosted,
    fit_forest,
    predict_proba,
)

from conftest import random_binary_problem, separable_dataset


def cover_expectation(tree, x, known):
    """Tree output with unknown features marginalized by cover ratios."""

    def rec(node):
        f = tree.feature[node]
        if f < 0:
            return float(tree.value[node])
        left, right = int(tree.children_left[node]), int(tree.children_right[node])
        if f in known:
            child = left if x[f] <= tree.threshold[node] else right
            return rec(child)
        wl = tree.cover[left] / tree.cover[node]
        wr = tree.cover[right] / tree.cover[node]
        return wl * rec(left) + wr * rec(right)

    return rec(0)


def brute_shapley(model, x):
    """Subset-enumeration Shapley values of the cover-expectation game."""
    d = len(model.feature_names)
    fact = [math.factorial(i) for i in range(d + 1)]
    phi = np.zeros(d)
    base = 0.0
    for tree in model.trees:
        base += cover_expectation(tree, x, frozenset())
        others = list(range(d))
        for i in range(d):
            rest = [f for f in others if f != i]
            for size in range(d):
                for subset in itertools.combinations(rest, size):
                    s = frozenset(subset)
                    w = fact[size] * fact[d - size - 1] / fact[d]
                    phi[i] += w * (
                        cover_expectation(tree, x, s | {i}) - cover_expectation(tree, x, s)
                    )
    if model.kind == "forest":
        k = len(model.trees)
        return phi / k, base / k
    return phi, model.base_score + base


def test_single_split_closed_form():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([False, False, True, True])
    model = fit_forest(X, y, ForestParams(n_estimators=1, bootstrap=False,
                                          tree=TreeParams(max_depth=1), seed=0))
    tree = model.trees[0]
    left, right = int(tree.children_left[0]), int(tree.children_right[0])
    r_l = tree.cover[left] / tree.cover[0]
    r_r = tree.cover[right] / tree.cover[0]
    expected_base = r_l * tree.value[left] + r_r * tree.value[right]
    att = tree_shap(model, np.array([0.0]))
    assert att.base_value == pytest.approx(expected_base, abs=1e-15)
    assert att.values[0] == pytest.approx(tree.value[left] - expected_base, abs=1e-15)
    assert att.output() == pytest.approx(predict_proba(model, [[0.0]])[0], abs=1e-15)


def test_local_accuracy_forest():
    rng = np.random.default_rng(0)
    X, y = random_binary_problem(rng, 120, 6)
    model = fit_forest(X, y, ForestParams(n_estimators=12, tree=TreeParams(max_depth=5), seed=2))
    queries = rng.normal(size=(100, 6))
    phi, base = shap_matrix(model, queries)
    probs = predict_proba(model, queries)
    err = np.abs(phi.sum(axis=1) + base - probs).max()
    assert err < 1e-9


def test_local_accuracy_boosted():
    rng = np.random.default_rng(1)
    X, y = random_binary_problem(rng, 120, 6)
    model = fit_boosted(X, y, BoostParams(n_estimators=25, learning_rate=0.2, max_depth=3, seed=3))
    queries = rng.normal(size=(100, 6))
    phi, base = shap_matrix(model, queries)
    probs = predict_proba(model, queries)
    margins = np.log(probs / (1.0 - probs))
    err = np.abs(phi.sum(axis=1) + base - margins).max()
    assert err < 1e-9


def test_matches_brute_shapley_forest():
    rng = np.random.default_rng(2)
    for trial in range(6):
        d = int(rng.integers(2, 6))
        X, y = random_binary_problem(rng, 40, d)
        model = fit_forest(X, y, ForestParams(
            n_estimators=3, tree=TreeParams(max_depth=3), seed=trial))
        for _ in range(4):
            x = rng.normal(size=d)
            want_phi, want_base = brute_shapley(model, x)
            att = tree_shap(model, x)
            assert att.base_value == pytest.approx(want_base, abs=1e-9)
            assert np.abs(att.values - want_phi).max() < 1e-9


def test_matches_brute_shapley_boosted():
    rng = np.random.default_rng(3)
    for trial in range(6):
        d = int(rng.integers(2, 6))
        X, y = random_binary_problem(rng, 40, d)
        model = fit_boosted(X, y, BoostParams(
            n_estimators=4, learning_rate=0.3, max_depth=3, seed=trial))
        for _ in range(4):
            x = rng.normal(size=d)
            want_phi, want_base = brute_shapley(model, x)
            att = tree_shap(model, x)
            assert att.base_value == pytest.approx(want_base, abs=1e-9)
            assert np.abs(att.values - want_phi).max() < 1e-9


def test_repeated_feature_on_path():
    # deep stair on one feature forces duplicate path entries
    X = np.linspace(0, 1, 32).reshape(-1, 1)
    y = (X[:, 0] > 0.3) & (X[:, 0] < 0.7)
    model = fit_forest(X, y, ForestParams(n_estimators=1, bootstrap=False,
                                          tree=TreeParams(max_depth=3), seed=0))
    assert model.trees[0].n_nodes > 3
    for xq in (0.1, 0.45, 0.9):
        x = np.array([xq])
        want_phi, want_base = brute_shapley(model, x)
        att = tree_shap(model, x)
        assert att.values[0] == pytest.approx(want_phi[0], abs=1e-12)
        assert att.output() == pytest.approx(predict_proba(model, x.reshape(1, -1))[0], abs=1e-12)


def test_dummy_feature_gets_zero():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 4))
    y = X[:, 0] > 0.0
    X[:, 3] = 0.0  # constant column can never split
    model = fit_forest(X, y, ForestParams(n_estimators=5, seed=1))
    phi, _ = shap_matrix(model, rng.normal(size=(20, 4)))
    assert np.abs(phi[:, 3]).max() == 0.0


def test_batch_equals_per_instance():
    rng = np.random.default_rng(5)
    X, y = random_binary_problem(rng, 50, 5)
    model = fit_boosted(X, y, BoostParams(n_estimators=6, seed=2))
    queries = rng.normal(size=(8, 5))
    phi_all, base_all = shap_matrix(model, queries)
    for i in range(8):
        phi_one, base_one = shap_matrix(model, queries[i])
        assert base_one == base_all
        # matmul summation order may differ between batch widths
        assert np.allclose(phi_one[0], phi_all[i], atol=1e-12, rtol=0.0)


def test_forest_shap_is_mean_of_trees():
    rng = np.random.default_rng(6)
    X, y = random_binary_problem(rng, 40, 4)
    model = fit_forest(X, y, ForestParams(n_estimators=4, seed=3))
    x = rng.normal(size=(1, 4))
    phi, base = shap_matrix(model, x)
    singles = []
    bases = []
    for tree in model.trees:
        single = type(model)(kind="forest", trees=(tree,), feature_names=model.feature_names)
        p, b = shap_matrix(single, x)
        singles.append(p)
        bases.append(b)
    assert np.allclose(phi, np.mean(singles, axis=0), atol=1e-12)
    assert base == pytest.approx(np.mean(bases), abs=1e-12)


def test_attribution_scale_tags():
    rng = np.random.default_rng(7)
    X, y = random_binary_problem(rng, 30, 3)
    forest = fit_forest(X, y, ForestParams(n_estimators=2, seed=0))
    boosted = fit_boosted(X, y, BoostParams(n_estimators=2, seed=0))
    assert tree_shap(forest, X[0]).output_scale == "probability"
    assert tree_shap(boosted, X[0]).output_scale == "margin"


def test_attribution_top():
    att = Attribution(feature_names=("a", "b", "c"),
                      values=np.array([0.1, -0.5, 0.3]),
                      base_value=0.2, output_scale="probability")
    assert att.top(2) == [("b", -0.5), ("c", 0.3)]
    assert att.output() == pytest.approx(0.2 + 0.1 - 0.5 + 0.3)


def test_importance_ranking_and_csv(tmp_path):
    ds = separable_dataset(80, seed=8)
    from morphoforge.data_model import ShapeCategory, binary_target
    X, y = ds.feature_matrix(), binary_target(ds, ShapeCategory.CUBE)
    model = fit_forest(X, y, ForestParams(n_estimators=10, tree=TreeParams(max_depth=4), seed=4))
    model.feature_names = tuple(ds.feature_names)
    ranking = importance_ranking(model, ds)
    assert ranking[0][0] == "Temperature, C"
    values = [v for _, v in ranking]
    assert values == sorted(values, reverse=True)
    assert {f for f, _ in ranking} == set(ds.feature_names)
    # matrix input must agree with dataset input
    ranking2 = importance_ranking(model, X)
    assert ranking == ranking2

    path = tmp_path / "imp.csv"
    save_importance_csv(ranking, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "feature,mean_abs_shap,rank"
    assert len(lines) == 1 + len(ranking)
    assert lines[1].startswith('"Temperature, C",')


def test_importance_tie_keeps_schema_order():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(40, 3))
    y = X[:, 1] > 0
    X[:, 0] = 0.0
    X[:, 2] = 0.0
    model = fit_forest(X, y, ForestParams(n_estimators=3, seed=5))
    ranking = importance_ranking(model, X)
    # the two dead features tie at zero and keep their column order
    assert [f for f, _ in ranking] == ["x1", "x0", "x2"]


def test_importance_empty_input():
    rng = np.random.default_rng(10)
    X, y = random_binary_problem(rng, 20, 3)
    model = fit_forest(X, y, ForestParams(n_estimators=2, seed=0))
    with pytest.raises(ModelError):
        importance_ranking(model, np.empty((0, 3)))


def test_dimension_mismatch():
    rng = np.random.default_rng(11)
    X, y = random_binary_problem(rng, 20, 3)
    model = fit_forest(X, y, ForestParams(n_estimators=2, seed=0))
    with pytest.raises(ModelError):
        shap_matrix(model, np.ones((2, 4)))
