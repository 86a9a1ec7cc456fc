"""Node-dropping curves, in-sample Shapley MSE comparison and fit-cost accounting."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from .errors import DataError
from .features import FeatureConfig, TrainStats
from .fitters import (
    SupervisionSet,
    UtilityWeights,
    build_supervision,
    fit_sgul_accuracy,
    fit_sgul_shapley,
    shapley_predictions,
)
from .graph import Graph, induced_view, k_hop_neighborhood, node_set
from .model import ModelParams, forward
from .perms import Permutation
from .valuation import ValueReport


@dataclass
class DropCurve:
    acc: np.ndarray  # Acc_0 .. Acc_K
    order: np.ndarray  # removal order

    @property
    def auc(self) -> float:
        return curve_auc(self.acc)

    @property
    def k(self) -> int:
        return len(self.acc) - 1


def curve_auc(acc) -> float:
    """Mean of Acc_1..Acc_K; Acc_0 is recorded but not scored."""
    acc = np.asarray(acc, dtype=np.float64)
    if len(acc) < 2:
        raise DataError("curve needs at least one removal")
    return float(acc[1:].mean())


def removal_order(report: ValueReport) -> np.ndarray:
    """Descending value, ties broken by ascending node id."""
    return report.nodes[np.lexsort((report.nodes, -report.values))]


def node_dropping(g_test: Graph, targets, report: ValueReport, params: ModelParams, labels=None) -> DropCurve:
    """Cumulatively remove the highest-valued neighbors and re-score target accuracy.

    Labels are used for evaluation only.
    """
    targets = node_set(targets, g_test.n_nodes)
    if labels is None:
        if not g_test.has_label(targets):
            raise DataError("node dropping needs labeled targets")
        labels = g_test.labels[targets]
    labels = np.asarray(labels)
    if np.any(labels < 0):
        raise DataError("node dropping needs labeled targets")
    hood = k_hop_neighborhood(g_test, targets, params.k_hops)
    if not np.array_equal(np.sort(report.nodes), hood):
        raise DataError("value report does not cover the target neighborhood")
    order = removal_order(report)
    keep = g_test.partition_mask(targets).copy()
    accs = []

    def score():
        view = induced_view(g_test, np.flatnonzero(keep))
        probs = forward(params, view)[view.local(targets)]
        return float(np.mean(np.argmax(probs, axis=1) == labels))

    accs.append(score())
    for v in order:
        keep[v] = False
        accs.append(score())
    return DropCurve(np.asarray(accs), order)


def random_report(nodes, seed: int) -> ValueReport:
    """Baseline that ranks neighbors in a seeded random order."""
    nodes = node_set(nodes)
    vals = np.random.default_rng(seed).permutation(len(nodes)).astype(np.float64)
    return ValueReport(nodes, vals, {"method": "random", "seed": int(seed)})


# ---------------------------------------------------------------- MSE comparison


def sign_test(a, b) -> float:
    """Two-sided exact sign test on paired samples; ties dropped, p = 1 when all tie."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    pos, neg = int(np.sum(d > 0)), int(np.sum(d < 0))
    if pos + neg == 0:
        return 1.0
    return float(binomtest(pos, pos + neg, 0.5).pvalue)


def shapley_mse(sup: SupervisionSet, w: UtilityWeights) -> float:
    return float(np.mean((sup.phi - shapley_predictions(sup, w)) ** 2))


def mse_report(sup: SupervisionSet, w_shapley: UtilityWeights, w_accuracy: UtilityWeights) -> dict:
    """Shapley-prediction MSE of both fits; sign test over per-row squared errors."""
    e_s = (sup.phi - shapley_predictions(sup, w_shapley)) ** 2
    e_a = (sup.phi - shapley_predictions(sup, w_accuracy)) ** 2
    return {
        "mse_shapley": float(e_s.mean()),
        "mse_accuracy": float(e_a.mean()),
        "paired_sign_test_p": sign_test(e_s, e_a),
    }


def mse_comparison(
    g_val: Graph,
    val_targets,
    params: ModelParams,
    stats: TrainStats,
    perms: list[Permutation],
    batch_size: int = 10,
    cfg: FeatureConfig = FeatureConfig(),
    names=None,
) -> dict:
    """Fit both objectives at lambda = 0 (no CV) on consecutive batches of ``batch_size``
    permutations and compare their in-sample Shapley MSE batch by batch."""
    names = tuple(names or cfg.names)
    rows = []
    for start in range(0, len(perms) - batch_size + 1, batch_size):
        sup = build_supervision(g_val, val_targets, params, stats, perms[start : start + batch_size], cfg)
        ws = fit_sgul_shapley(sup, (0.0,), names=names)
        wa = fit_sgul_accuracy(sup, (0.0,), names=names)
        rows.append((shapley_mse(sup, ws), shapley_mse(sup, wa)))
    s = np.array([r[0] for r in rows])
    a = np.array([r[1] for r in rows])
    return {
        "batches": len(rows),
        "mse_shapley": s.tolist(),
        "mse_accuracy": a.tolist(),
        "shapley_wins": int(np.sum(s <= a)),
        "mean_mse_shapley": float(s.mean()) if len(s) else float("nan"),
        "mean_mse_accuracy": float(a.mean()) if len(a) else float("nan"),
        "paired_sign_test_p": sign_test(s, a),
    }


# ---------------------------------------------------------------- cost


def expected_rows(perm_lengths) -> tuple[int, int]:
    """Closed-form design sizes: (one row per neighbor, one row per prefix incl. the empty one)."""
    lengths = list(perm_lengths)
    return (lengths[0] if lengths else 0), sum(n + 1 for n in lengths)


def cost_report(sup: SupervisionSet, lambda_grid=(0.0,), folds: int = 5, seed: int = 0, names=None) -> dict:
    """Row counts of both designs and wall-clock time of each fit."""
    names = tuple(names or sup.names)
    t0 = time.perf_counter()
    fit_sgul_shapley(sup, lambda_grid, folds, seed, names)
    t1 = time.perf_counter()
    fit_sgul_accuracy(sup, lambda_grid, folds, seed, names)
    t2 = time.perf_counter()
    return {
        "rows_shapley": sup.rows_shapley,
        "rows_accuracy": sup.rows_accuracy,
        "wall_time_shapley": t1 - t0,
        "wall_time_accuracy": t2 - t1,
    }
