import json
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fatigue_forge import gbt, shap
from fatigue_forge.errors import CapacityError, ModelIntegrityError, ValidationError
from fatigue_forge.gbt import Ensemble, TrainConfig, Tree

from conftest import DATA_DIR
from oracles import random_ensemble, shapley_by_definition


def stump(feature, threshold, left, right, covers=(1.0, 1.0)):
    return Tree([feature, -1, -1], [threshold, 0, 0], [1, -1, -1], [2, -1, -1], [0.0, left, right],
                [covers[0] + covers[1], covers[0], covers[1]])


def model_of(*trees, base=0.0, m=None):
    m = m if m is not None else 1 + max(int(t.feature.max()) for t in trees)
    return Ensemble(tuple(trees), base, tuple(f"f{j}" for j in range(m)))


def trained(seed, m=4, n=150, **cfg):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, m))
    y = X[:, 0] * 2 + np.abs(X[:, 1]) * 3 + X[:, 0] * X[:, 2] + r.normal(size=n)
    params = dict(n_estimators=8, max_depth=4, seed=seed)
    params.update(cfg)
    return gbt.train(X, y, TrainConfig(**params)), X


# --- conditional expectation --------------------------------------------------


def test_cond_expectation_equal_covers():
    model = model_of(stump(0, 0.5, 0.0, 10.0), base=3.0)
    assert shap.cond_expectation(model, [0.0], []) == 8.0


def test_cond_expectation_full_set_is_prediction():
    model, X = trained(1)
    for x in X[:10]:
        assert shap.cond_expectation(model, x, range(4)) == pytest.approx(gbt.predict(model, x)[0], abs=1e-12)


def test_cond_expectation_empty_set_is_training_mean():
    model, X = trained(2, subsample=0.7)
    assert shap.cond_expectation(model, X[0], []) == pytest.approx(gbt.predict(model, X).mean(), abs=1e-9)
    assert shap.expected_value(model) == pytest.approx(gbt.predict(model, X).mean(), abs=1e-9)


def test_cond_expectation_rejects_bad_subset():
    with pytest.raises(ValidationError):
        shap.cond_expectation(model_of(stump(0, 0.5, 0, 1)), [0.0], [3])


def test_zero_cover_is_integrity_error():
    bad = model_of(stump(0, 0.5, 1.0, 2.0, covers=(0.0, 0.0)))
    with pytest.raises(ModelIntegrityError):
        shap.cond_expectation(bad, [0.0], [])
    with pytest.raises(ModelIntegrityError):
        shap.tree_shap(bad, [0.0])
    with pytest.raises(ModelIntegrityError):
        shap.shapley_bruteforce(bad, [0.0])


# --- brute force against the definition ----------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_bruteforce_matches_subset_formula(seed):
    r = np.random.default_rng(seed)
    model = random_ensemble(r, m=4, n_trees=3, max_depth=3)
    x = r.normal(size=4)
    ref = shapley_by_definition(lambda S: shap.cond_expectation(model, x, S), 4)
    np.testing.assert_allclose(shap.shapley_bruteforce(model, x).phi, ref, rtol=1e-12, atol=1e-12)


def test_coalition_vector_matches_cond_expectation(rng):
    model = random_ensemble(rng, m=5, n_trees=4, max_depth=4)
    x = rng.normal(size=5)
    v = shap.all_coalition_values(model, x)
    for mask in range(32):
        S = [j for j in range(5) if mask >> j & 1]
        assert v[mask] == pytest.approx(shap.cond_expectation(model, x, S), abs=1e-12)


def test_capacity_error_points_to_tree_shap():
    model = Ensemble((), 0.0, tuple(f"f{j}" for j in range(21)))
    with pytest.raises(CapacityError, match="tree_shap"):
        shap.shapley_bruteforce(model, np.zeros(21))


# --- axioms -------------------------------------------------------------------


def leaf_only(value=4.0, m=3):
    return Ensemble((Tree([-1], [0.0], [-1], [-1], [value], [10.0]),), 1.0, tuple(f"f{j}" for j in range(m)))


@pytest.mark.parametrize("method", [shap.shapley_bruteforce, shap.tree_shap])
def test_single_leaf_has_zero_phi(method):
    e = method(leaf_only(), [1.0, 2.0, 3.0])
    assert np.all(e.phi == 0.0)
    assert e.base_value == e.prediction == 5.0


@pytest.mark.parametrize("method", [shap.shapley_bruteforce, shap.tree_shap])
def test_dummy_features(method):
    model = model_of(stump(0, 0.0, -1.0, 3.0, (3.0, 1.0)), stump(0, 1.0, 0.5, -0.5, (2.0, 2.0)), base=2.0, m=3)
    x = np.array([0.5, 9.0, -9.0])
    e = method(model, x)
    assert e.phi[1] == 0.0 and e.phi[2] == 0.0
    assert e.phi[0] == pytest.approx(e.prediction - e.base_value, abs=1e-12)


@pytest.mark.parametrize("method", [shap.shapley_bruteforce, shap.tree_shap])
def test_symmetric_features(method):
    # f = 2 when both features are high, equal covers throughout
    tree = Tree(
        [0, 1, 1, -1, -1, -1, -1],
        [0.5, 0.5, 0.5, 0, 0, 0, 0],
        [1, 3, 5, -1, -1, -1, -1],
        [2, 4, 6, -1, -1, -1, -1],
        [0, 0, 0, 0.0, 0.0, 0.0, 2.0],
        [4, 2, 2, 1, 1, 1, 1],
    )
    e = method(model_of(tree), [1.0, 1.0])
    assert e.phi[0] == pytest.approx(e.phi[1], abs=1e-15)
    assert e.phi.sum() == pytest.approx(1.5)


# --- tree_shap ----------------------------------------------------------------


@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 6), st.integers(1, 7))
def test_tree_shap_equals_bruteforce(seed, m, depth, n_trees):
    r = np.random.default_rng(seed)
    model = random_ensemble(r, m=m, n_trees=n_trees, max_depth=depth)
    x = r.normal(size=m)
    fast = shap.tree_shap(model, x)
    slow = shap.shapley_bruteforce(model, x)
    np.testing.assert_allclose(fast.phi, slow.phi, rtol=1e-9, atol=1e-12)
    assert fast.base_value == pytest.approx(slow.base_value, abs=1e-12)
    assert fast.base_value + fast.phi.sum() == pytest.approx(fast.prediction, abs=1e-6)


def test_trained_models_local_accuracy():
    for seed in range(5):
        model, X = trained(seed, colsample=0.6, subsample=0.8)
        phi, base = shap.tree_shap_values(model, X)
        assert np.max(np.abs(base + phi.sum(axis=1) - gbt.predict(model, X))) <= 1e-6


def test_threads_do_not_change_values():
    model, X = trained(3, n=400)
    one, _ = shap.tree_shap_values(model, X, threads=1)
    three, _ = shap.tree_shap_values(model, X, threads=3)
    assert one.tobytes() == three.tobytes()


def test_additive_across_trees():
    model, X = trained(5)
    phi, _ = shap.tree_shap_values(model, X[:20])
    parts = sum(shap.tree_shap_values(Ensemble((t,), 0.0, model.feature_names), X[:20])[0] for t in model.trees)
    assert np.max(np.abs(phi - parts)) <= 1e-9


def test_duplicated_trees_double_phi():
    model, X = trained(6)
    doubled = Ensemble(model.trees + model.trees, model.base_score, model.feature_names)
    phi1, base1 = shap.tree_shap_values(model, X[:20])
    phi2, base2 = shap.tree_shap_values(doubled, X[:20])
    np.testing.assert_allclose(phi2, 2 * phi1, rtol=1e-12, atol=1e-12)
    assert base2 - model.base_score == pytest.approx(2 * (base1 - model.base_score), abs=1e-12)


def _timed(model, X):
    shap.tree_shap_values(model, X[:2])
    start = time.perf_counter()
    shap.tree_shap_values(model, X)
    return time.perf_counter() - start


def test_runtime_grows_polynomially_with_features(rng):
    model, X = trained(7, m=11, n=500, n_estimators=30, max_depth=6)
    # same trees, but every other split reads a duplicate column
    trees = []
    for k, t in enumerate(model.trees):
        f = np.where((t.feature >= 0) & (np.arange(t.n_nodes) % 2 == k % 2), t.feature + 11, t.feature)
        trees.append(Tree(f, t.threshold, t.left, t.right, t.value, t.cover))
    wide = Ensemble(tuple(trees), model.base_score, tuple(f"f{j}" for j in range(22)))
    X22 = np.hstack([X, X])
    t11 = min(_timed(model, X) for _ in range(3))
    t22 = min(_timed(wide, X22) for _ in range(3))
    phi, base = shap.tree_shap_values(wide, X22)
    assert np.max(np.abs(base + phi.sum(axis=1) - gbt.predict(model, X))) <= 1e-6
    # brute force would grow by 2^11; the recursion should not even triple
    assert t22 / t11 < 3.0


# --- importance and dependence -------------------------------------------------


def test_importance_zero_keeps_order():
    r = shap.importance(np.zeros((3, 3)), ["a", "b", "c"])
    assert r.features == ("a", "b", "c") and r.global_impact == (0.0, 0.0, 0.0)


def test_importance_tie_by_index():
    r = shap.importance(np.array([[1.0, -2.0], [1.0, 0.0]]), ["first", "second"])
    assert list(r) == [("first", 2.0), ("second", 2.0)]


def test_importance_sorted_descending(rng):
    r = shap.importance(rng.normal(size=(50, 6)) * np.arange(1, 7), list("abcdef"))
    assert list(r.global_impact) == sorted(r.global_impact, reverse=True)
    assert r.top(2) == ("f", "e")


def test_importance_accepts_explanations(rng):
    model, X = trained(8)
    exps = [shap.tree_shap(model, x) for x in X[:5]]
    phi, _ = shap.tree_shap_values(model, X[:5])
    assert shap.importance(exps, model.feature_names) == shap.importance(phi, model.feature_names)


def test_importance_errors():
    with pytest.raises(ValidationError):
        shap.importance([], ["a"])
    with pytest.raises(ValidationError):
        shap.importance(np.zeros((2, 2)), ["a"])


def test_dependence_zero_phi(rng):
    X = rng.normal(size=(400, 2))
    d = shap.dependence(np.zeros((400, 2)), X, 0, bins=10)
    assert np.all(d.mean_shap == 0.0)


def test_dependence_percentile_filter(rng):
    X = rng.normal(size=(2000, 1))
    d = shap.dependence(X.copy(), X, 0, bins=20)
    assert abs(d.feature_values.size - 1900) <= 1
    lo, hi = np.percentile(X[:, 0], [2.5, 97.5])
    assert d.feature_values.min() >= lo and d.feature_values.max() <= hi
    assert d.bin_counts.sum() == d.feature_values.size
    assert np.all(np.diff(d.mean_shap) > 0)


def test_dependence_v_shape(rng):
    x = rng.uniform(0, 100, size=(3000, 1))
    phi = np.abs(x - 50.0)
    d = shap.dependence(phi, x, 0, bins=20, feature_name="hrv")
    assert d.feature_name == "hrv"
    k = int(np.argmin(d.mean_shap))
    assert abs(d.bin_centers[k] - 50.0) < 5.0
    assert np.all(np.diff(d.mean_shap[: k + 1]) < 0) and np.all(np.diff(d.mean_shap[k:]) > 0)


def test_dependence_constant_feature():
    d = shap.dependence(np.ones((10, 1)), np.full((10, 1), 7.0), 0)
    assert d.bin_centers.tolist() == [7.0] and d.mean_shap.tolist() == [1.0]
    assert "constant" in d.note


def test_dependence_needs_two_bins():
    with pytest.raises(ValidationError):
        shap.dependence(np.zeros((5, 1)), np.zeros((5, 1)), 0, bins=1)


# --- force records ------------------------------------------------------------


def test_force_constant_model():
    rec = shap.explain_instance(leaf_only(), [0.0, 0.0, 0.0])
    assert rec.positive == () and rec.negative == ()
    assert rec.explanation.prediction == rec.explanation.base_value


def test_force_groups_add_up():
    model, X = trained(9)
    for row in range(10):
        rec = shap.explain_instance(model, X[row], row_index=row)
        total = rec.explanation.base_value + sum(i["phi"] for i in rec.positive + rec.negative)
        assert total == pytest.approx(rec.explanation.prediction, abs=1e-6)
        assert all(i["phi"] > 0 for i in rec.positive) and all(i["phi"] < 0 for i in rec.negative)
        for group in (rec.positive, rec.negative):
            mags = [abs(i["phi"]) for i in group]
            assert mags == sorted(mags, reverse=True)


def golden_model():
    """Three stumps with balanced covers: base 22.92, prediction 25.90."""
    names = ("heart_rate_variability", "hr_avg60", "br_avg60")
    trees = (
        stump(0, 50.0, 2.0, -2.0),
        stump(1, 70.0, 1.48, -1.48),
        stump(2, 15.0, -0.5, 0.5),
    )
    return Ensemble(trees, 22.92, names), np.array([38.0, 61.5, 12.0])


def test_force_record_golden():
    model, x = golden_model()
    rec = shap.explain_instance(model, x, row_index=0).to_dict()
    assert rec["base"] == pytest.approx(22.92, abs=1e-12)
    assert rec["prediction"] == pytest.approx(25.90, abs=1e-12)
    golden = json.loads((DATA_DIR / "force_golden.json").read_text())
    assert rec == golden
