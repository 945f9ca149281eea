import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pair_counting_ari
from urbanembed import evaluation as ev
from urbanembed.errors import ContractError
from urbanembed.ingest import RegionRegistry

labelings = st.lists(st.integers(0, 3), min_size=2, max_size=25)


# -- k-means -------------------------------------------------------------------
def test_kmeans_k_equals_n_is_exact():
    x = np.random.default_rng(0).normal(size=(7, 3))
    res = ev.kmeans(x, 7, seed=0)
    assert res.objective == pytest.approx(0.0, abs=1e-20)
    assert sorted(res.labels.tolist()) == list(range(7))


def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(1)
    x = np.vstack([rng.normal(size=(15, 2)), rng.normal(size=(15, 2)) + 50.0])
    truth = np.repeat([0, 1], 15)
    res = ev.kmeans(x, 2, seed=3)
    assert ev.ari(truth, res.labels) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_kmeans_objective_monotone_per_iteration(seed, k):
    x = np.random.default_rng(seed).normal(size=(40, 3))
    res = ev.kmeans(x, k, seed=seed, restarts=3)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))
    assert res.objective <= h[-1] + 1e-9


def test_empty_cluster_reseeded_at_farthest_point():
    x = np.array([[0.0], [0.1], [0.2], [10.0]])
    centers = np.array([[0.1], [10.0], [1000.0]])  # the third centre attracts nothing
    labels, centers, history = ev._lloyd(x, centers, max_iter=50)
    assert len(set(labels.tolist())) == 3
    assert np.all(np.diff(history) <= 1e-12)


def test_kmeans_deterministic_and_validates_k():
    x = np.random.default_rng(2).normal(size=(20, 4))
    a, b = ev.kmeans(x, 3, seed=5), ev.kmeans(x, 3, seed=5)
    assert np.array_equal(a.labels, b.labels) and a.objective == b.objective
    with pytest.raises(ContractError):
        ev.kmeans(x, 21)


# -- NMI / ARI -----------------------------------------------------------------
def test_identical_and_relabelled():
    a = [0, 0, 1, 1, 2, 2, 2]
    b = [5, 5, 9, 9, 7, 7, 7]
    assert ev.nmi(a, a) == pytest.approx(1.0) and ev.ari(a, a) == 1.0
    assert ev.nmi(a, b) == pytest.approx(1.0) and ev.ari(a, b) == 1.0


def test_crossed_pairs_hand_case():
    # same-a pairs {01, 23}; same-b pairs {02, 13}; no pair shared, so index = 0,
    # expected = 2*2/6 and max = 2, giving (0 - 2/3) / (2 - 2/3) = -1/2
    a, b = [0, 0, 1, 1], [0, 1, 0, 1]
    assert ev.nmi(a, b) == 0.0
    assert ev.ari(a, b) == -0.5
    assert pair_counting_ari(a, b) == pytest.approx(-0.5, abs=1e-15)


def test_constant_labels_convention():
    assert ev.nmi([0, 0, 0], [0, 1, 2]) == 0.0
    assert ev.nmi([1, 1], [1, 1]) == 0.0


@settings(max_examples=60, deadline=None)
@given(labelings, st.data())
def test_metrics_symmetric_and_match_oracle(a, data):
    b = data.draw(st.lists(st.integers(0, 3), min_size=len(a), max_size=len(a)))
    assert ev.ari(a, b) == pytest.approx(ev.ari(b, a), abs=1e-12)
    assert ev.nmi(a, b) == pytest.approx(ev.nmi(b, a), abs=1e-12)
    assert 0.0 <= ev.nmi(a, b) <= 1.0
    assert ev.ari(a, b) == pytest.approx(pair_counting_ari(a, b), abs=1e-12)


def test_metrics_agree_with_sklearn():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.integers(0, 4, 30), rng.integers(0, 5, 30)
        assert ev.nmi(a, b) == pytest.approx(metrics.normalized_mutual_info_score(a, b, average_method="geometric"), abs=1e-12)
        assert ev.ari(a, b) == pytest.approx(metrics.adjusted_rand_score(a, b), abs=1e-12)


# -- Lasso -----------------------------------------------------------------------
@pytest.mark.parametrize("standardize", [True, False])
def test_lasso_zero_penalty_is_least_squares(standardize):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 5)) * [1, 2, 3, 0.5, 10]
    y = x @ [1.0, -2.0, 0.5, 3.0, 0.1] + 4.0 + rng.normal(scale=0.3, size=50)
    model = ev.lasso_fit(x, y, 0.0, standardize=standardize)
    design = np.hstack([x, np.ones((50, 1))])
    ref = np.linalg.lstsq(design, y, rcond=None)[0]
    assert np.abs(model.coef - ref[:5]).max() < 1e-6
    assert abs(model.intercept - ref[5]) < 1e-6


def test_lasso_dead_zone():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(30, 4))
    y = rng.normal(size=30)
    z = (x - x.mean(0)) / x.std(0)
    lam = np.abs(z.T @ (y - y.mean())).max() / 30
    model = ev.lasso_fit(x, y, lam)
    assert np.all(model.coef == 0.0)
    assert model.intercept == pytest.approx(y.mean())


def test_lasso_one_feature_soft_threshold():
    x, y = np.array([[-1.0], [0.0], [1.0]]), np.array([-2.0, 0.0, 2.0])
    cov, var = 4 / 3, 2 / 3
    raw = ev.lasso_fit(x, y, 0.5, standardize=False)
    assert raw.coef[0] == pytest.approx((cov - 0.5) / var, abs=1e-12)  # 1.25
    # standardised: the same formula holds for z = x / sd, where var(z) = 1
    sd = math.sqrt(var)
    std = ev.lasso_fit(x, y, 0.5)
    assert std.coef[0] * sd == pytest.approx(cov / sd - 0.5, abs=1e-12)


def test_lasso_objective_monotone_and_constant_column():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(40, 6))
    x[:, 2] = 3.0
    y = x[:, 0] - x[:, 1] + rng.normal(size=40)
    model = ev.lasso_fit(x, y, 0.05)
    assert model.coef[2] == 0.0
    assert np.all(np.diff(model.objective_history) <= 1e-12)


# -- popularity ------------------------------------------------------------------
def test_popularity_realizable_target():
    rng = np.random.default_rng(7)
    e = rng.normal(size=(60, 8))
    y = e @ rng.normal(size=8) + 2.0
    res = ev.evaluate_popularity(e, y, seed=0)
    assert res.r2 >= 0.999 and res.lam <= 1e-3
    assert all(f["rmse"] >= f["mae"] >= 0 for f in res.per_fold)
    assert len(res.per_fold) == 5 and len(res.grid_rmse) == 13


def test_popularity_noise_target():
    rng = np.random.default_rng(8)
    res = ev.evaluate_popularity(rng.normal(size=(100, 10)), rng.normal(size=100), seed=1)
    assert res.r2 <= 0.1


def test_popularity_folds_and_guards():
    folds = ev.fold_indices(23, 5, seed=4)
    assert sorted(np.concatenate(folds).tolist()) == list(range(23))
    assert [len(f) for f in folds] == [5, 5, 5, 4, 4]
    assert all(np.array_equal(a, b) for a, b in zip(folds, ev.fold_indices(23, 5, seed=4)))
    with pytest.raises(ContractError):
        ev.evaluate_popularity(np.zeros((4, 2)), np.zeros(4))


def test_popularity_log1p_changes_target_space():
    rng = np.random.default_rng(9)
    e = rng.normal(size=(40, 3))
    y = np.expm1(e @ [0.5, -0.2, 0.1] + 3.0)
    assert ev.evaluate_popularity(e, y, log1p=True).r2 >= 0.999


# -- clustering & exports --------------------------------------------------------
def test_clustering_one_hot_and_random_control():
    labels = np.repeat(np.arange(12), 15)
    res = ev.evaluate_clustering(np.eye(12)[labels], labels, k=12)
    assert res.nmi == pytest.approx(1.0) and res.ari == 1.0
    noise = np.random.default_rng(10).normal(size=(180, 96))
    assert abs(ev.evaluate_clustering(noise, labels, k=12).ari) < 0.15


def test_exports(tmp_path):
    reg = RegionRegistry(["a", "b", "c"])
    ev.write_clusters_csv(tmp_path / "c.csv", np.array([2, 0, 2]), reg)
    assert (tmp_path / "c.csv").read_text() == "region_id,cluster\na,2\nb,0\nc,2\n"
    square = {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 0]]]}
    ev.write_cluster_geojson(tmp_path / "c.geojson", np.array([2, 0, 2]), reg, [square] * 3)
    doc = json.loads((tmp_path / "c.geojson").read_text())
    assert [f["properties"]["cluster"] for f in doc["features"]] == [2, 0, 2]

    report = ev.metrics_report("cluster", "full", 0, clustering=ev.ClusteringResult(np.zeros(3), 0.0, 0.5, 0.25, 2, 0))
    assert set(report) == set(ev.REPORT_KEYS) and report["r2"] is None
    ev.write_metrics_json(tmp_path / "m1.json", report)
    ev.write_metrics_json(tmp_path / "m2.json", dict(reversed(list(report.items()))))
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
