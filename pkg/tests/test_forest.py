import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prosokit.forest import CLASSIFY, REGRESS, Hyperparams, fit_forest
from prosokit.stats import balanced_accuracy

SMALL = Hyperparams(num_trees=25)


def separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(-1, -0.01, n // 2), rng.uniform(0.01, 1, n // 2)])
    return x[:, None], np.where(x > 0, "b", "a")


def test_separable_one_feature():
    X, y = separable()
    model = fit_forest(X, y, CLASSIFY, Hyperparams(num_trees=100), seed=1)
    assert balanced_accuracy(y, model.predict(X)) == 1.0


def test_constant_target_regression():
    X = np.random.default_rng(0).normal(size=(50, 3))
    model = fit_forest(X, np.full(50, 2.5), REGRESS, SMALL, seed=0)
    assert all(t.feature.size == 1 and t.is_leaf[0] for t in model.trees)
    assert np.all(model.predict(X) == 2.5)


def test_same_seed_identical_any_thread_count():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 8))
    y = X[:, 0] + rng.normal(size=300)
    a = fit_forest(X, y, REGRESS, Hyperparams(num_trees=40, min_node_size=5), seed=9, n_jobs=1)
    b = fit_forest(X, y, REGRESS, Hyperparams(num_trees=40, min_node_size=5), seed=9, n_jobs=4)
    for ta, tb in zip(a.trees, b.trees):
        for f in ("feature", "threshold", "left", "right", "value", "n_samples"):
            np.testing.assert_array_equal(getattr(ta, f), getattr(tb, f))
    assert a.predict(X).tobytes() == b.predict(X).tobytes()
    c = fit_forest(X, y, REGRESS, Hyperparams(num_trees=40, min_node_size=5), seed=10)
    assert c.predict(X).tobytes() != a.predict(X).tobytes()


def test_tree_structure_invariants():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 6))
    y = (X[:, 1] + X[:, 2] > 0).astype(int)
    for min_node in (1, 5):
        model = fit_forest(X, y, CLASSIFY, Hyperparams(num_trees=10, min_node_size=min_node), seed=0)
        assert len(model.trees) == 10 and model.mtry == 2
        for t in model.trees:
            internal = ~t.is_leaf
            assert np.all(t.feature[internal] < 6)
            assert np.all(t.n_samples[t.is_leaf] >= min_node)
            assert np.all(t.n_samples[internal] >= 2 * min_node)
            kids = t.n_samples[t.left[internal]] + t.n_samples[t.right[internal]]
            np.testing.assert_array_equal(kids, t.n_samples[internal])


def test_out_of_bag_fraction():
    X = np.random.default_rng(5).normal(size=(1000, 2))
    model = fit_forest(X, X[:, 0], REGRESS, Hyperparams(num_trees=50), seed=2)
    frac = model.oob_counts / 1000
    assert np.all(np.abs(frac - np.exp(-1)) <= 0.03)


def test_vote_tie_goes_to_smaller_label():
    # two trees, each a single leaf of a different class: 1:1 vote
    X = np.array([[0.0], [1.0]])
    model = fit_forest(X, np.array(["m", "f"]), CLASSIFY, Hyperparams(num_trees=200), seed=0)
    out = model.tree_outputs(X)
    tied = (out == 0).sum(axis=1) == (out == 1).sum(axis=1)
    pred = model.predict(X)
    assert np.all(pred[tied] == "f")


def test_tree_order_invariance():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(120, 4))
    y = (X[:, 0] > 0.2).astype(int)
    model = fit_forest(X, y, CLASSIFY, Hyperparams(num_trees=30), seed=3)
    from prosokit.forest import ForestModel

    shuffled = ForestModel(model.task, model.trees[::-1], model.hyperparams, model.mtry, model.seed,
                           model.n_features, classes=model.classes)
    np.testing.assert_array_equal(model.predict(X), shuffled.predict(X))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([CLASSIFY, REGRESS]), st.floats(-5, 5))
def test_constant_feature_never_changes_predictions(seed, task, const):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 3))
    y = (X[:, 0] > 0).astype(int) if task == CLASSIFY else X[:, 0] + rng.normal(size=60)
    if task == CLASSIFY and np.unique(y).size < 2:
        y[0] = 1 - y[0]
    hp = Hyperparams(num_trees=8, mtry=3)
    base = fit_forest(X, y, task, hp, seed=seed).predict(X)
    X2 = np.column_stack([X, np.full(60, const)])
    wide = fit_forest(X2, y, task, Hyperparams(num_trees=8, mtry=4), seed=seed).predict(X2)
    np.testing.assert_array_equal(base, wide)


def test_mtry_defaults():
    assert Hyperparams().resolve_mtry(20) == 4
    assert Hyperparams().resolve_mtry(88) == 9
    assert Hyperparams(mtry=50).resolve_mtry(3) == 3


@pytest.mark.parametrize("X,y,task,msg", [
    (np.zeros((1, 2)), [1], CLASSIFY, "two rows"),
    (np.zeros((4, 2)), [1, 1, 1, 1], CLASSIFY, "two classes"),
    (np.full((2, 1), np.nan), [1.0, 2.0], REGRESS, "non-finite"),
    (np.zeros((2, 1)), [1.0, 2.0], "cluster", "unknown task"),
])
def test_fit_errors(X, y, task, msg):
    with pytest.raises(ValueError, match=msg):
        fit_forest(X, np.asarray(y), task, SMALL)


def test_predict_shape_check():
    X, y = separable(20)
    model = fit_forest(X, y, CLASSIFY, SMALL)
    with pytest.raises(ValueError, match="features"):
        model.predict(np.zeros((3, 2)))
