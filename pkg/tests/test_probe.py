import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal
from sklearn.linear_model import LogisticRegression

from capbench.extract import EmbeddingTable
from capbench.probe import (MetricError, Predictions, ProbeError,
                            ProbeReport, ProbeSpec, TaskInfo, accuracy, aggregate_scores,
                            best_layer, disagreement_matrix, eer, fit_lda,
                            fit_logreg, metric, run_benchmark, uar)
from capbench.probe.benchmark import ProbeRow, predictions_jsonl, read_predictions_jsonl


def blobs(n_per, means, scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal(m, scale, size=(n, len(m))) for m, n in zip(means, n_per)])
    y = np.concatenate([[f"c{i}"] * n for i, n in enumerate(n_per)])
    return X, y


# -- metrics ------------------------------------------------------------------------


def test_accuracy_and_uar_fixture():
    pred, lab = ["a", "b", "b"], ["a", "b", "a"]
    assert accuracy(pred, lab) == pytest.approx(2 / 3)
    assert uar(pred, lab) == 0.75


def test_uar_equals_accuracy_when_balanced():
    lab = ["a", "a", "b", "b", "c", "c"]
    pred = ["a", "b", "b", "b", "a", "c"]
    assert uar(pred, lab) == accuracy(pred, lab)


def test_uar_hand_values():
    lab = ["a"] * 4 + ["b"] * 2
    pred = ["a", "a", "a", "b", "a", "b"]
    assert uar(pred, lab) == (3 / 4 + 1 / 2) / 2


def test_eer_fixtures():
    assert eer([0.9, 0.8, 0.7, 0.1, 0.2], [1, 1, 1, 0, 0]) == 0.0
    assert eer([0.9, 0.8, 0.3, 0.7, 0.2, 0.1], [1, 1, 1, 0, 0, 0]) == pytest.approx(1 / 3)
    with pytest.raises(MetricError):
        metric("eer", ["a", "a"], scores=[0.1, 0.2], positive="a")


def brute_force_eer(scores, pos):
    scores = [float(s) for s in scores]
    pos = [bool(p) for p in pos]
    n_pos, n_neg = sum(pos), len(pos) - sum(pos)
    thresholds = sorted(set(scores)) + [float("inf")]
    far, frr = [], []
    for t in thresholds:
        far.append(sum(1 for s, p in zip(scores, pos) if not p and s >= t) / n_neg)
        frr.append(sum(1 for s, p in zip(scores, pos) if p and s < t) / n_pos)
    for k in range(len(thresholds)):
        if frr[k] >= far[k]:
            if k == 0 or frr[k] == far[k]:
                return far[k]
            d0, d1 = frr[k - 1] - far[k - 1], frr[k] - far[k]
            a = -d0 / (d1 - d0)
            return far[k - 1] + a * (far[k] - far[k - 1])


def test_eer_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = 200
        pos = rng.random(n) < rng.uniform(0.2, 0.8)
        pos[:2] = [True, False]
        scores = rng.normal(size=n) + pos * rng.uniform(0, 2)
        if rng.random() < 0.3:
            scores = np.round(scores, 1)  # ties
        assert abs(eer(scores, pos) - brute_force_eer(scores, pos)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.booleans()), min_size=2, max_size=40))
def test_eer_bounds_and_oracle(trials):
    scores, pos = zip(*trials)
    if all(pos) or not any(pos):
        return
    v = eer(scores, pos)
    assert 0.0 <= v <= 1.0
    assert abs(v - brute_force_eer(scores, pos)) <= 1e-9


# -- classifiers --------------------------------------------------------------------


def test_logreg_separable():
    X, y = blobs([100, 100], [[4, 4, 0, 0], [-4, -4, 0, 0]])
    model = fit_logreg(X, y)
    assert accuracy(model.predict(X), y) == 1.0


def test_logreg_matches_sklearn():
    X, y = blobs([40, 30, 20], [[1, 0, 0], [0, 1, 0], [0, 0, 1]], seed=3)
    l2 = 0.05
    ours = fit_logreg(X, y, ProbeSpec("logreg", l2=l2, tol=1e-10))
    ref = LogisticRegression(C=1.0 / (len(X) * l2), tol=1e-12, max_iter=10_000).fit(X, y)
    np.testing.assert_allclose(ours.predict_proba(X), ref.predict_proba(X), atol=1e-5)


def test_balanced_logreg_helps_minority():
    X, y = blobs([180, 20], [[0.0, 0.0], [1.2, 1.2]], scale=1.0, seed=4)
    plain = fit_logreg(X, y, ProbeSpec("logreg"))
    bal = fit_logreg(X, y, ProbeSpec("balanced_logreg"))
    minority = y == "c1"
    rec = lambda m: np.mean(m.predict(X[minority]) == "c1")
    assert rec(bal) >= rec(plain)
    assert rec(bal) > 0.5


def test_logreg_missing_class():
    X, y = blobs([5, 5], [[0, 0], [1, 1]])
    with pytest.raises(ProbeError, match="class absent"):
        fit_logreg(X, y, classes=np.array(["c0", "c1", "c2"]))


def test_lda_boundary_perpendicular_to_mean_difference():
    X, y = blobs([2000, 2000], [[0, 0, 0], [2, 1, -1]], seed=5)
    m = fit_lda(X, y, shrinkage=1e-6)
    w = m.weights[:, 1] - m.weights[:, 0]
    diff = X[y == "c1"].mean(0) - X[y == "c0"].mean(0)
    cos = w @ diff / np.linalg.norm(w) / np.linalg.norm(diff)
    assert cos > 0.999


def test_lda_large_shrinkage_is_nearest_mean():
    X, y = blobs([30, 30, 30], [[0, 0], [3, 0], [0, 3]], scale=1.5, seed=6)
    m = fit_lda(X, y, shrinkage=1e9)
    means = np.stack([X[y == c].mean(0) for c in m.classes])
    nearest = m.classes[np.argmin(((X[:, None] - means[None]) ** 2).sum(-1), axis=1)]
    assert np.array_equal(m.predict(X), nearest)


def test_lda_posteriors_match_gaussian_densities():
    X, y = blobs([12, 8, 10], [[0, 0, 0], [1, 2, 0], [0, 1, 2]], seed=7)
    lam = 0.3
    m = fit_lda(X, y, shrinkage=lam)
    classes = np.unique(y)
    means = [X[y == c].mean(0) for c in classes]
    resid = np.concatenate([X[y == c] - mu for c, mu in zip(classes, means)])
    cov = resid.T @ resid / (len(X) - 3) + lam * np.eye(3)
    priors = [np.mean(y == c) for c in classes]
    joint = np.stack([p * multivariate_normal(mu, cov).pdf(X) for mu, p in zip(means, priors)], 1)
    post = joint / joint.sum(1, keepdims=True)
    np.testing.assert_allclose(m.predict_proba(X), post, atol=1e-8)


def test_lda_singular_without_shrinkage():
    X, y = blobs([3, 3], [np.zeros(10), np.ones(10)])
    with pytest.raises(ProbeError, match="shrinkage > 0"):
        fit_lda(X, y, shrinkage=0.0)


# -- benchmark -----------------------------------------------------------------------


def _table(task, splits, layer=0, policy="full"):
    t = EmbeddingTable()
    for split, (X, y) in splits.items():
        for i, (x, lab) in enumerate(zip(X, y)):
            t.add({"clip_id": f"{task}/{split}/{i:04d}", "task_id": task, "label": str(lab),
                   "split": split, "layer_index": layer, "window_policy": policy}, x)
    return t


def test_single_cell_aggregate_equals_metric():
    tr, dv, te = (blobs([20, 20], [[0, 0], [2, 2]], seed=s) for s in (1, 2, 3))
    rep = run_benchmark(_table("t", {"train": tr, "dev": dv, "test": te}), [TaskInfo("t")])
    [row] = rep.chosen()
    assert aggregate_scores(rep, "test") == {(0, "full"): row.test_metric}
    assert len(rep.rows) == 3


def test_aggregate_arithmetic_with_eer():
    rows = [ProbeRow("a", 0, "full", "lda", "accuracy", 0.9, 0.9, True),
            ProbeRow("b", 0, "full", "lda", "uar", 0.8, 0.8, True),
            ProbeRow("c", 0, "full", "lda", "eer", 0.1, 0.1, True)]
    rep = ProbeReport(rows)
    assert aggregate_scores(rep)[(0, "full")] == pytest.approx(0.8667, abs=5e-5)


def test_best_layer_ties_prefer_shallow():
    rows = [ProbeRow("a", l, "full", "lda", "accuracy", d, 0.5, True)
            for l, d in [(0, 0.5), (1, 0.7), (2, 0.7), (3, 0.6)]]
    assert best_layer(ProbeReport(rows)) == 1


def test_missing_split_and_task():
    tr, dv = blobs([5, 5], [[0], [1]]), blobs([5, 5], [[0], [1]])
    table = _table("t", {"train": tr, "dev": dv})
    with pytest.raises(ProbeError, match="missing split: test"):
        run_benchmark(table, [TaskInfo("t")])
    with pytest.raises(ProbeError, match="not present"):
        run_benchmark(table, [TaskInfo("other")])


def test_report_csv_round_trip():
    tr, dv, te = (blobs([10, 10], [[0, 0], [2, 2]], seed=s) for s in (1, 2, 3))
    rep = run_benchmark(_table("t", {"train": tr, "dev": dv, "test": te}), [TaskInfo("t")])
    back = ProbeReport.from_csv("# header: x\n" + rep.to_csv())
    assert back.rows == rep.rows


def test_threaded_benchmark_matches_serial():
    tr, dv, te = (blobs([10, 10, 10], [[0, 0], [2, 2], [0, 3]], seed=s) for s in (1, 2, 3))
    table = _table("t", {"train": tr, "dev": dv, "test": te})
    a = run_benchmark(table, [TaskInfo("t")], workers=1)
    b = run_benchmark(table, [TaskInfo("t")], workers=3)
    assert a.rows == b.rows


def test_eer_task_reports_positive_scores():
    tr, dv, te = (blobs([15, 15], [[0, 0], [1.5, 1.5]], seed=s) for s in (4, 5, 6))
    lab = lambda y: np.where(y == "c1", "spoof", "bonafide")
    table = _table("s", {k: (X, lab(y)) for k, (X, y) in
                         {"train": tr, "dev": dv, "test": te}.items()})
    rep = run_benchmark(table, [TaskInfo("s", "eer", "spoof")])
    [row] = rep.chosen()
    preds = rep.predictions[("s", 0, "full")]
    assert row.metric == "eer" and 0 <= row.test_metric < 0.5
    assert row.test_metric == eer(preds.scores, np.array(preds.labels) == "spoof")
    assert read_predictions_jsonl(predictions_jsonl(preds)) == preds


# -- disagreement ----------------------------------------------------------------------


def _preds(pred, labels):
    return Predictions([f"c{i}" for i in range(len(labels))], labels, pred)


def test_disagreement_example():
    lab = ["a", "b", "b", "b"]
    m = disagreement_matrix({"X": {"t": _preds(["a", "a", "b", "b"], lab)},
                             "Y": {"t": _preds(["a", "b", "b", "a"], lab)}})
    # disagreements at 1 (Y right) and 3 (X right)
    assert m.values == [[None, 0.5], [0.5, None]]
    assert m.to_csv().splitlines()[1] == "X,,0.5"


def test_identical_models_are_excluded():
    lab = ["a", "b"]
    m = disagreement_matrix({"X": {"t": _preds(["a", "a"], lab)},
                             "Y": {"t": _preds(["a", "a"], lab)}})
    assert m.values[0][1] is None and ("X", "Y", "t") in m.excluded


def test_oracle_model_always_wins_disagreements():
    rng = np.random.default_rng(0)
    preds = {"X": {}, "oracle": {}}
    for t in ("t1", "t2", "t3"):
        lab = list(rng.choice(["a", "b", "c"], 30))
        preds["X"][t] = _preds(list(rng.choice(["a", "b", "c"], 30)), lab)
        preds["oracle"][t] = _preds(lab, lab)
    m = disagreement_matrix(preds)
    assert m.values[0][1] == 1.0 and m.values[1][0] == 0.0
