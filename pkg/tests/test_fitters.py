import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import gnnvalue.fitters as fitters
from gnnvalue.errors import DataError
from gnnvalue.features import FEATURE_NAMES, TrainStats
from gnnvalue.fitters import (
    BaselineCalibration,
    UtilityWeights,
    atc_threshold,
    baseline_utility,
    build_supervision,
    calibrate_atc,
    calibrate_doc,
    confidence_scores,
    fit_sgul_accuracy,
    fit_sgul_shapley,
    fit_weights,
    nn_lasso,
    shapley_predictions,
)
from gnnvalue.graph import induced_view
from gnnvalue.model import forward
from gnnvalue.perms import Permutation, sample_permutations
from toys import path, random_instance, random_params, single_split_graph, star


def _stats(g, params, seed=0):
    rng = np.random.default_rng(seed)
    return TrainStats(rng.standard_normal(g.n_features), rng.standard_normal((params.n_classes, g.n_features)))


def _supervision(seed, m=6, max_players=6):
    rng = np.random.default_rng(seed)
    g, targets = random_instance(rng, max_players=max_players)
    params = random_params(g.n_features, 3, k=2, seed=seed)
    perms = sample_permutations(g, targets, 2, m, seed)
    return build_supervision(g, targets, params, _stats(g, params, seed), perms), perms


# ---------------------------------------------------------------- solver


def test_huge_lambda_gives_zero():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, (30, 4))
    y = X @ [1.0, 2.0, 0.0, 0.5]
    assert np.all(fit_weights(X, y, [1e9]).w == 0.0)
    assert np.all(nn_lasso(X, y, 1e9)[0] == 0.0)


def test_exact_single_feature():
    phi = np.array([0.1, -0.3, 0.25, 0.7])
    w = fit_weights((2 * phi)[:, None], phi, [0.0], feature_names=("f",))
    assert w.w[0] == pytest.approx(0.5, abs=1e-9)


def test_sparse_recovery():
    rng = np.random.default_rng(1)
    psi = rng.standard_normal((200, 9))
    phi = 0.3 * psi[:, 0] + 0.7 * psi[:, 3] + rng.normal(0, 1e-3, 200)
    w = fit_weights(psi, phi, [1e-4]).w
    assert abs(w[0] - 0.3) <= 0.05 and abs(w[3] - 0.7) <= 0.05


def test_negative_coefficient_clipped():
    x = np.linspace(-1, 1, 20)
    w, _ = nn_lasso(x[:, None], -x, 0.0)
    assert w[0] == 0.0


def test_zero_column_ignored():
    X = np.column_stack([np.zeros(5), np.arange(5.0)])
    w, _ = nn_lasso(X, 3 * np.arange(5.0), 0.0)
    assert w[0] == 0.0 and w[1] == pytest.approx(3.0)


def test_all_zero_design_warns():
    with pytest.warns(RuntimeWarning, match="all-zero"):
        w = fit_weights(np.zeros((4, 3)), np.ones(4), feature_names=("a", "b", "c"))
    assert np.all(w.w == 0)


def test_fit_input_errors():
    with pytest.raises(DataError):
        fit_weights(np.ones((3, 2)), np.ones(2), feature_names=("a", "b"))
    with pytest.raises(DataError):
        fit_weights(np.ones((3, 2)), np.ones(3), [-1.0], feature_names=("a", "b"))
    with pytest.raises(DataError):
        fit_weights(np.ones((0, 2)), np.ones(0), feature_names=("a", "b"))


def test_cv_deterministic_and_reported():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((40, 5))
    y = X @ [0.5, 0, 0, 1.0, 0] + rng.normal(0, 0.1, 40)
    a = fit_weights(X, y, seed=3, feature_names="abcde")
    b = fit_weights(X, y, seed=3, feature_names="abcde")
    assert np.array_equal(a.w, b.w) and a.lam == b.lam
    assert a.cv["folds"] == 5 and len(a.cv["cv_mse"]) == 5
    assert a.lam == a.cv["lambda_grid"][int(np.argmin(a.cv["cv_mse"]))]


def test_scaling_folds_back():
    rng = np.random.default_rng(4)
    X = rng.uniform(0, 1, (50, 2)) * [1.0, 1000.0]
    y = X @ [0.4, 0.002]
    w = fit_weights(X, y, [0.0], feature_names="ab")
    assert np.allclose(w.w, [0.4, 0.002], rtol=1e-6)
    assert np.allclose(w.scaling, np.abs(X).max(axis=0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(1e-4, 10), st.floats(1.01, 100))
def test_nonnegative_and_l1_monotone(seed, lam, factor):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(5, 30)), int(rng.integers(1, 6))
    X = rng.standard_normal((n, d))
    y = rng.standard_normal(n)
    lo = fit_weights(X, y, [lam], scale=False, feature_names=range(d)).w
    hi = fit_weights(X, y, [lam * factor], scale=False, feature_names=range(d)).w
    assert np.all(lo >= 0) and np.all(hi >= 0)
    assert lo.sum() >= hi.sum() - 1e-6


def test_constant_accuracy_intercept():
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 1, (20, 9))
    w = fit_weights(X, np.full(20, 0.5), [0.0], intercept=True, method="sgul-accuracy")
    assert w.intercept == pytest.approx(0.5, abs=1e-9)
    assert np.allclose(w.w, 0.0, atol=1e-9)


def test_utility_weights_invariants_and_json(tmp_path):
    with pytest.raises(DataError):
        UtilityWeights(np.array([-0.1]), 0.0, np.ones(1), ("a",))
    with pytest.raises(DataError):
        UtilityWeights(np.array([0.1]), -1.0, np.ones(1), ("a",))
    with pytest.raises(DataError):
        UtilityWeights(np.array([np.inf]), 0.0, np.ones(1), ("a",))
    w = UtilityWeights(np.array([0.25, 0.0]), 1e-3, np.array([2.0, 1.0]), ("a", "b"), 0.4, "sgul-accuracy")
    w.save(tmp_path / "w.json")
    back = UtilityWeights.load(tmp_path / "w.json")
    assert np.array_equal(back.w, w.w) and back.intercept == 0.4 and back.feature_names == ("a", "b")
    assert back.predict([[4.0, 1.0]])[0] == pytest.approx(1.4)


# ---------------------------------------------------------------- supervision


def test_one_neighbor_counts():
    g = path(2, d=2, labels=[1, 0])
    params = random_params(2, 2)
    sup = build_supervision(g, [0], params, _stats(g, params), [Permutation((1,), (0,), 2)])
    assert sup.rows_shapley == 1 and sup.rows_accuracy == 2
    assert sup.psi.shape == (1, len(FEATURE_NAMES))


def test_hand_telescoped_phi():
    g = single_split_graph(4, [(0, 1), (0, 2), (1, 3)], d=2, labels=[0, 1, 0, 1], seed=3)
    params = random_params(2, 2, k=2, seed=9, scale=3.0)
    perms = sample_permutations(g, [0], 2, 12, 1)
    sup = build_supervision(g, [0], params, _stats(g, params), perms)

    def acc(nodes):
        view = induced_view(g, nodes)
        return float(forward(params, view)[view.local([0])].argmax() == 0)

    hand = np.zeros(4)
    for p in perms:
        active = [0]
        for v in p.order:
            before = acc(active)
            active.append(v)
            hand[v] += acc(active) - before
    hand /= len(perms)
    assert np.allclose(sup.phi, hand[sup.nodes], atol=1e-12)


def test_constant_accuracy_zero_phi():
    # zero weights: the prediction is fixed by the bias whatever the neighborhood
    g = star(3, d=2, labels=[0, 1, 1, 0])
    params = random_params(2, 2, k=1, scale=0.0)
    perms = sample_permutations(g, [0], 1, 5, 0)
    sup = build_supervision(g, [0], params, _stats(g, params), perms)
    assert np.ptp(sup.acc) == 0
    assert np.all(sup.phi == 0)


def test_unlabeled_target_rejected():
    g = path(2, labels=[-1, 0])
    params = random_params(3, 2)
    with pytest.raises(DataError, match="unlabeled"):
        build_supervision(g, [0], params, _stats(g, params), [Permutation((1,), (0,), 2)])


def test_row_counts_and_accuracy_rows_exceed():
    sup, perms = _supervision(6)
    assert sup.rows_shapley == len(sup.nodes)
    assert sup.rows_accuracy == sum(len(p) + 1 for p in perms)
    assert sup.rows_accuracy > sup.rows_shapley


@pytest.mark.parametrize("seed", range(8))
def test_direct_fit_dominates_at_lambda_zero(seed):
    sup, _ = _supervision(seed, m=10)
    ws = fit_sgul_shapley(sup, [0.0])
    wa = fit_sgul_accuracy(sup, [0.0])
    mse_s = np.mean((sup.phi - shapley_predictions(sup, ws)) ** 2)
    mse_a = np.mean((sup.phi - shapley_predictions(sup, wa)) ** 2)
    assert mse_s <= mse_a + 1e-10


def test_accuracy_fit_needs_two_rows():
    sup, _ = _supervision(0)
    sup.acc = sup.acc[:1]
    with pytest.raises(DataError):
        fit_sgul_accuracy(sup)


# ---------------------------------------------------------------- baselines


def test_atc_threshold_examples():
    s = [0.9, 0.6, 0.3]
    t = atc_threshold(s, 2 / 3)
    assert 0.3 <= t < 0.6 and np.mean(np.array(s) > t) == pytest.approx(2 / 3)
    t = atc_threshold(s, 1.0)
    assert t < 0.3 and np.mean(np.array(s) > t) == 1.0
    t = atc_threshold(s, 0.0)
    assert t >= 0.9 and np.mean(np.array(s) > t) == 0.0
    with pytest.raises(DataError):
        atc_threshold([], 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(["atc-mc", "atc-ne"]))
def test_atc_self_consistency(seed, variant):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    probs = rng.dirichlet(np.ones(3), size=n)
    labels = rng.integers(0, 3, size=n)
    cal = calibrate_atc(probs, labels, variant)
    acc = np.mean(probs.argmax(axis=1) == labels)
    frac = np.mean(confidence_scores(probs, variant) > cal.t)
    assert abs(frac - acc) <= 1 / n + 1e-12


def test_confidence_scores():
    p = np.array([[1.0, 0.0], [0.5, 0.5]])
    assert confidence_scores(p, "atc-mc").tolist() == [1.0, 0.5]
    assert confidence_scores(p, "atc-ne") == pytest.approx([0.0, np.log(2)])


def _fake_forward(monkeypatch, probs):
    monkeypatch.setattr(fitters, "forward", lambda params, view: np.asarray(probs, dtype=np.float64))


def test_baseline_examples(monkeypatch):
    g = star(2)
    view = induced_view(g, [0, 1, 2])
    params = random_params(3, 3)
    _fake_forward(monkeypatch, [[0.9, 0.05, 0.05], [0.4, 0.3, 0.3], [0.2, 0.6, 0.2]])
    atc = BaselineCalibration("atc-mc", t=0.5)
    assert baseline_utility(atc, view, [0, 1], params) == 0.5
    cc = BaselineCalibration("class-conf")
    assert baseline_utility(cc, view, [2], params, fixed=[1]) == pytest.approx(0.6)
    mc = BaselineCalibration("max-conf")
    assert baseline_utility(mc, view, [2], params) == pytest.approx(0.9)
    _fake_forward(monkeypatch, [[0.7, 0.3], [0.7, 0.3], [0.5, 0.5]])
    doc = BaselineCalibration("doc", beta=1.0, acc_val=0.8, c_val=0.75)
    assert baseline_utility(doc, view, [0, 1], params) == pytest.approx(0.75)


def test_calibration_invariants(tmp_path):
    with pytest.raises(DataError):
        BaselineCalibration("atc-mc")
    with pytest.raises(DataError):
        BaselineCalibration("doc", beta=float("nan"))
    with pytest.raises(DataError):
        BaselineCalibration("gnnevaluator")
    cal = BaselineCalibration("doc", beta=0.5, acc_val=0.7, c_val=0.6)
    cal.save(tmp_path / "c.json")
    assert BaselineCalibration.load(tmp_path / "c.json") == cal


def test_doc_beta_least_squares():
    sup, _ = _supervision(3, m=8)
    col = FEATURE_NAMES.index("max_conf")
    dx = sup.x_acc[:, col] - sup.full_conf[sup.acc_batch]
    dy = sup.acc - sup.full_acc[sup.acc_batch]
    cal = calibrate_doc(sup, 0.6, 0.7)
    # the residual is orthogonal to the regressor at the least-squares slope
    assert abs(dx @ (dy - cal.beta * dx)) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_baselines_total_and_finite(seed):
    rng = np.random.default_rng(seed)
    g, targets = random_instance(rng)
    params = random_params(g.n_features, 3, seed=seed)
    fixed = rng.integers(0, 3, size=len(targets))
    cals = [BaselineCalibration("atc-mc", t=0.5), BaselineCalibration("atc-ne", t=0.8),
            BaselineCalibration("doc", beta=0.3, acc_val=0.5, c_val=0.6), BaselineCalibration("max-conf"),
            BaselineCalibration("class-conf")]
    sizes = [len(targets), g.n_nodes]
    for n in sizes:
        view = induced_view(g, np.arange(n))
        for cal in cals:
            assert np.isfinite(baseline_utility(cal, view, targets, params, fixed))
