import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxrank.gbdt import (
    FlatData,
    GbdtModel,
    GbdtParams,
    RegressionTree,
    _TreeBuilder,
    _presort,
    feature_importance,
    flatten_records,
    gbdt_train,
    lambdarank_gradients,
)
from ctxrank.kmeans import ClusterConfigError, bundle_cluster_features, kmeans_assign, kmeans_fit
from ctxrank.metrics import mean_ndcg, ndcg_from_scores

from factories import random_records, small_schema


def _synthetic(seed, n_queries=120, n_docs=15, n_features=5, noise=0.3):
    """Grades driven by the first two features; the rest are noise."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_queries * n_docs, n_features))
    util = X[:, 0] + 0.5 * X[:, 1] + rng.normal(0, noise, size=len(X))
    y = np.clip(np.floor(util + 1.0), 0, 4)
    group = np.arange(0, len(X) + 1, n_docs)
    return FlatData(X, y, group, [f"q{i}" for i in range(n_queries)], [f"f{i}" for i in range(n_features)])


def _ndcg(model, data, k=5, n_trees=None):
    scores = data.split_scores(model.predict(data.X, n_trees))
    return mean_ndcg([ndcg_from_scores(s, y, k) for s, y in zip(scores, data.split_scores(data.y))])


# ---------------------------------------------------------------- lambdas


def test_equal_scores_pair_gets_half_delta():
    lam, w = lambdarank_gradients([0.0, 0.0], [1, 0])
    # |dNDCG| of swapping ranks 1 and 2 with gains (1, 0) and ideal DCG 1
    delta = 1.0 - 1.0 / np.log2(3)
    assert lam[0] == pytest.approx(delta / 2)
    assert lam[1] == pytest.approx(-delta / 2)
    assert w[0] == pytest.approx(delta / 4)


def test_all_equal_labels_give_zero():
    lam, w = lambdarank_gradients([0.3, -1.0, 2.0], [2, 2, 2])
    assert not lam.any() and not w.any()


def test_reversed_pair_pushes_positive_up():
    lam, _ = lambdarank_gradients([-1.0, 1.0], [1, 0])
    assert lam[0] > 0 > lam[1]


def test_truncation_ignores_pairs_beyond_cutoff():
    s = -np.arange(15.0)
    y = np.zeros(15)
    y[12], y[13] = 1, 2
    lam, _ = lambdarank_gradients(s, y, truncation=10)
    # the two positives are both ranked beyond 10: only their pairs with top-10 docs matter
    assert lam[12] > 0 and lam[13] > 0
    assert lam[14] == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10_000))
def test_lambda_conservation(n, seed):
    rng = np.random.default_rng(seed)
    lam, w = lambdarank_gradients(rng.normal(size=n) * 3, rng.integers(0, 5, size=n))
    assert abs(lam.sum()) <= 1e-6
    assert np.all(w >= 0)


# ---------------------------------------------------------------- trees


def test_tree_respects_leaf_limit_and_binary_shape():
    data = _synthetic(0)
    g = data.X[:, 0] + np.random.default_rng(0).normal(0, 0.1, len(data.y))
    tree, fitted, _ = _TreeBuilder(data.X, _presort(data.X), max_leaves=7, min_leaf=5).build(g, np.ones_like(g))
    assert tree.n_leaves == 7
    for i, f in enumerate(tree.feature):
        assert (f < 0) == (tree.left[i] < 0) == (tree.right[i] < 0)
    assert np.allclose(tree.predict(data.X), fitted)


def test_leaf_values_are_newton_steps():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    g = np.array([1.0, 3.0, -2.0, -2.0])
    h = np.array([1.0, 1.0, 2.0, 2.0])
    tree, fitted, gains = _TreeBuilder(X, _presort(X), max_leaves=2, min_leaf=1).build(g, h)
    assert np.allclose(fitted, [2.0, 2.0, -1.0, -1.0])
    assert tree.threshold[0] == 0.5
    assert set(gains) == {0}


def test_constant_feature_never_split():
    X = np.column_stack([np.zeros(50), np.arange(50.0)])
    g = np.where(np.arange(50) < 25, 1.0, -1.0)
    tree, _, gains = _TreeBuilder(X, _presort(X), 10, 2).build(g, np.ones(50))
    assert 0 not in gains
    assert all(f != 0 for f in tree.feature)


def test_prediction_additivity_exact():
    train = _synthetic(1)
    model = gbdt_train(train, None, GbdtParams(n_trees=8, max_leaves=10))
    for t in range(len(model.trees)):
        before = model.predict(train.X, t)
        after = model.predict(train.X, t + 1)
        assert np.array_equal(after, before + model.shrinkage * model.trees[t].predict(train.X))


@pytest.mark.parametrize("seed", range(3))
def test_training_ndcg_improves(seed):
    train = _synthetic(seed)
    model = gbdt_train(train, None, GbdtParams(n_trees=50, max_leaves=20))
    assert _ndcg(model, train, n_trees=50) >= _ndcg(model, train, n_trees=1)


def test_early_stop_on_unlearnable_validation():
    train = _synthetic(2)
    valid = _synthetic(3)
    valid.y = np.random.default_rng(0).permutation(valid.y)  # labels unrelated to features
    valid.X = np.random.default_rng(1).normal(size=valid.X.shape)
    p = GbdtParams(n_trees=500, max_leaves=10, early_stop=30)
    model = gbdt_train(train, valid, p)
    rounds = len(model.valid_curve)
    assert rounds < 500
    assert rounds - model.best_round <= 30 + 1
    assert len(model.trees) == model.best_round


def test_training_is_deterministic():
    train, valid = _synthetic(4), _synthetic(5)
    a = gbdt_train(train, valid, GbdtParams(n_trees=10, max_leaves=8))
    b = gbdt_train(train, valid, GbdtParams(n_trees=10, max_leaves=8))
    assert a.to_text() == b.to_text()


def test_serialization_roundtrip(tmp_path):
    train = _synthetic(6)
    model = gbdt_train(train, None, GbdtParams(n_trees=5, max_leaves=6))
    model.save(tmp_path / "m.txt")
    back = GbdtModel.load(tmp_path / "m.txt")
    assert np.array_equal(back.predict(train.X), model.predict(train.X))
    assert back.to_text() == model.to_text()
    assert RegressionTree.from_nodes(model.trees[0].nodes()).nodes() == model.trees[0].nodes()
    with pytest.raises(ValueError):
        GbdtModel.from_text('{"format": "other"}')


def test_feature_importance_shares():
    train = _synthetic(7, n_features=6)
    model = gbdt_train(train, None, GbdtParams(n_trees=10, max_leaves=8))
    imp = feature_importance(model)["features"]
    assert sum(imp.values()) == pytest.approx(1.0, abs=1e-9)
    assert imp["f0"] > imp["f5"]
    X = np.column_stack([train.X, np.zeros(len(train.y))])
    zero = FlatData(X, train.y, train.group, train.query_ids, train.feature_names + ["unused"])
    imp2 = feature_importance(gbdt_train(zero, None, GbdtParams(n_trees=3, max_leaves=8)))
    assert imp2["features"]["unused"] == 0.0


def test_zero_bundle_block_reproduces_plain_model():
    schema = small_schema()
    recs = random_records(8, schema, n_users=6, per_user=10)
    plain = flatten_records(recs, schema)
    # every query in a cluster whose bundled values are all zero is impossible by design,
    # so withhold cluster information by zeroing the block directly
    ctx = flatten_records(recs, schema, clusters={r.query_id: 0 for r in recs}, n_clusters=10)
    ctx.X[:, plain.X.shape[1]:] = 0.0
    p = GbdtParams(n_trees=6, max_leaves=8, min_samples_leaf=3)
    a = gbdt_train(plain, None, p)
    b = gbdt_train(ctx, None, p)
    assert np.array_equal(a.predict(plain.X), b.predict(ctx.X))
    assert feature_importance(b)["cluster_blocks"].get("c0", 0.0) == 0.0


def test_flat_rows_layout():
    schema = small_schema()
    recs = random_records(9, schema, n_users=2, per_user=3)
    flat = flatten_records(recs, schema, clusters={r.query_id: 2 for r in recs}, n_clusters=10)
    base = 2 + 2 + 3 + 2 + 4
    assert flat.X.shape == (sum(r.n_docs for r in recs), base + 30)
    r0 = recs[0]
    assert np.array_equal(flat.X[0, :2], r0.q_cont)
    assert np.array_equal(flat.X[0, base + 6 : base + 9], [r0.d_cont[0, 0], r0.d_cont[0, 1], r0.qd_cont[0, 0]])
    assert flat.feature_names[base + 6] == "c2:recency"


# ---------------------------------------------------------------- k-means and bundling


def test_bundle_examples():
    out = bundle_cluster_features([1.0, 2.0, 3.0], 0, 10)
    assert out.shape == (30,)
    assert out[:3].tolist() == [1.0, 2.0, 3.0] and not out[3:].any()
    assert np.count_nonzero(bundle_cluster_features([0.5, -1.0, 2.0], 7, 10)) == 3
    with pytest.raises(IndexError):
        bundle_cluster_features([1.0, 2.0, 3.0], 10, 10)


def test_kmeans_n_points_n_clusters():
    x = np.random.default_rng(0).normal(size=(10, 4))
    m = kmeans_fit(x, 10, seed=0)
    assert m.inertia == pytest.approx(0.0, abs=1e-9)


def test_kmeans_inertia_non_increasing():
    x = np.random.default_rng(1).normal(size=(500, 8))
    m = kmeans_fit(x, 10, seed=3)
    h = np.array(m.inertia_history)
    assert np.all(np.diff(h) <= 1e-9)


def test_kmeans_recovers_blobs():
    rng = np.random.default_rng(2)
    a = rng.normal(0, 1, size=(500, 5))
    b = rng.normal(8, 1, size=(500, 5))
    m = kmeans_fit(np.vstack([a, b]), 2, seed=0)
    lab = kmeans_assign(m, np.vstack([a, b]))
    purity = max(np.mean(lab[:500] == lab[0]), 0) * 0.5 + np.mean(lab[500:] == lab[500]) * 0.5
    assert lab[0] != lab[500]
    assert purity >= 0.99


def test_kmeans_assignment_optimal():
    x = np.random.default_rng(4).normal(size=(300, 6))
    m = kmeans_fit(x, 5, seed=1)
    lab = kmeans_assign(m, x)
    d = ((x[:, None, :] - m.centroids[None]) ** 2).sum(-1)
    assert np.all(d[np.arange(len(x)), lab] <= d.min(axis=1) + 1e-9)


def test_kmeans_ties_go_to_lowest_index():
    from ctxrank.kmeans import KMeansModel

    m = KMeansModel(np.array([[1.0], [-1.0]]), seed=0)
    assert kmeans_assign(m, [[0.0]])[0] == 0


def test_kmeans_empty_cluster_reseeded():
    # duplicated points force k-means++ to pick coincident centers
    x = np.vstack([np.zeros((20, 2)), np.ones((20, 2)) * 5])
    m = kmeans_fit(x, 3, seed=0)
    assert np.all(np.isfinite(m.centroids))


def test_kmeans_too_few_points():
    with pytest.raises(ClusterConfigError):
        kmeans_fit(np.zeros((3, 2)), 10)


def test_kmeans_deterministic_and_serializable():
    x = np.random.default_rng(5).normal(size=(200, 3))
    a, b = kmeans_fit(x, 4, seed=9), kmeans_fit(x, 4, seed=9)
    assert np.array_equal(a.centroids, b.centroids)
    from ctxrank.kmeans import KMeansModel

    assert np.array_equal(KMeansModel.from_dict(a.to_dict()).centroids, a.centroids)


def test_recency_cluster_block_dominates_bm25f_block():
    # cluster 0 queries care only about recency, cluster 1 only about bm25f
    rng = np.random.default_rng(12)
    rows, labels = [], []
    n_q, n_d = 200, 20
    for q in range(n_q):
        c = q % 2
        f = rng.random((n_d, 3))  # recency, email_length, bm25f
        util = f[:, 0] if c == 0 else f[:, 2]
        labels.append(np.clip(np.floor((util + rng.normal(0, 0.05, n_d)) * 5) - 2, 0, 4))
        rows.append(np.hstack([f, np.stack([bundle_cluster_features(x, c, 2) for x in f])]))
    names = ["recency", "email_length", "bm25f"] + [f"c{c}:{n}" for c in range(2) for n in
                                                    ("recency", "email_length", "bm25f")]
    data = FlatData(np.vstack(rows), np.concatenate(labels), np.arange(0, n_q * n_d + 1, n_d),
                    [f"q{i}" for i in range(n_q)], names)
    imp = feature_importance(gbdt_train(data, None, GbdtParams(n_trees=20, max_leaves=16)))
    assert imp["features"]["c0:recency"] > imp["features"]["c0:bm25f"]
    assert set(imp["cluster_blocks"]) == {"c0", "c1"}
