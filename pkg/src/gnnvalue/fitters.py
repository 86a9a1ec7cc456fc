"""Surrogate utilities fitted on the labeled validation graph.

Two linear surrogates share one solver (non-negative L1-penalised least squares
by cyclic coordinate descent):

* ``fit_sgul_shapley`` regresses validation Shapley values on feature-Shapley
  vectors, so the fit directly targets the quantity being estimated.
* ``fit_sgul_accuracy`` regresses prefix accuracy on prefix features.

The label-free accuracy estimators (ATC, DoC, max/class confidence) are
calibrated here as well and exposed as scalar set utilities.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .features import FEATURE_NAMES, FeatureConfig, FeatureExtractor, TrainStats
from .graph import Graph, SubgraphView, node_set, split_view
from .model import ModelParams, forward
from .perms import Permutation, sample_permutations
from .valuation import AccuracyUtility, feature_shapley_from_traces, perm_digest, run_traces, scalar_shapley_from_traces

DEFAULT_LAMBDA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
TOL = 1e-8
MAX_SWEEPS = 10_000


# ---------------------------------------------------------------- solver


def nn_lasso(X, y, lam: float, tol: float = TOL, max_sweeps: int = MAX_SWEEPS, w0=None) -> tuple[np.ndarray, int]:
    """argmin_{w >= 0} ||y - Xw||^2 + lam * sum(w) by cyclic coordinate descent.

    Returns (w, sweeps used). Columns with zero norm stay at 0.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)
    col_sq = np.einsum("ij,ij->j", X, X)
    r = y - X @ w
    half = 0.5 * lam
    for sweep in range(1, max_sweeps + 1):
        max_step = 0.0
        for j in range(d):
            if col_sq[j] == 0.0:
                continue
            xj = X[:, j]
            old = w[j]
            rho = xj @ r + col_sq[j] * old
            new = max(0.0, (rho - half) / col_sq[j])
            if new != old:
                r -= xj * (new - old)
                w[j] = new
                max_step = max(max_step, abs(new - old))
        if max_step < tol:
            return w, sweep
    return w, max_sweeps


@dataclass
class UtilityWeights:
    w: np.ndarray
    lam: float
    scaling: np.ndarray
    feature_names: tuple
    intercept: float | None = None
    method: str = "sgul-shapley"
    cv: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.any(self.w < 0) or not np.all(np.isfinite(self.w)):
            raise DataError("weights must be finite and non-negative")
        if self.lam < 0:
            raise DataError("lambda must be >= 0")

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + (self.intercept or 0.0)

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "feature_names": list(self.feature_names),
            "w": [float(v) for v in self.w],
            "lambda": float(self.lam),
            "scaling": [float(v) for v in self.scaling],
        }
        if self.intercept is not None:
            d["intercept"] = float(self.intercept)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UtilityWeights":
        return cls(
            np.asarray(d["w"], dtype=np.float64),
            float(d["lambda"]),
            np.asarray(d["scaling"], dtype=np.float64),
            tuple(d["feature_names"]),
            d.get("intercept"),
            d.get("method", "sgul-shapley"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "UtilityWeights":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _fit_fixed(X, y, lam, intercept, scale):
    """Fit at one lambda; returns (w in original units, intercept, scale factors)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = np.max(np.abs(X), axis=0) if (scale and len(X)) else np.ones(X.shape[1])
    s = np.where(s > 0, s, 1.0)
    Xs = X / s
    if intercept:
        xm, ym = Xs.mean(axis=0), y.mean()
        ws, _ = nn_lasso(Xs - xm, y - ym, lam)
        b = float(ym - xm @ ws)
    else:
        ws, _ = nn_lasso(Xs, y, lam)
        b = None
    return ws / s, b, s


def fit_weights(
    X,
    y,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    folds: int = 5,
    seed: int = 0,
    intercept: bool = False,
    scale: bool = True,
    feature_names: Sequence[str] = FEATURE_NAMES,
    method: str = "sgul-shapley",
) -> UtilityWeights:
    """Non-negative L1 fit with lambda chosen by k-fold CV on held-out squared error."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError("design matrix and targets disagree in length")
    if len(X) == 0:
        raise DataError("no supervision rows")
    grid = [float(v) for v in lambda_grid]
    if not grid or any(v < 0 for v in grid):
        raise DataError("lambda grid must be non-empty and non-negative")
    names = tuple(feature_names)
    if not np.any(X):
        warnings.warn("all-zero design matrix; returning zero weights", RuntimeWarning, stacklevel=2)
        b = float(y.mean()) if intercept else None
        return UtilityWeights(np.zeros(X.shape[1]), grid[0], np.ones(X.shape[1]), names, b, method)

    cv: dict = {}
    lam = grid[0]
    if len(X) >= 2 and len(grid) > 1:
        k = max(2, min(folds, len(X)))
        fold = np.random.default_rng(seed).permutation(len(X)) % k
        scores = []
        for cand in grid:
            sse = 0.0
            for f in range(k):
                tr, te = fold != f, fold == f
                w, b, _ = _fit_fixed(X[tr], y[tr], cand, intercept, scale)
                pred = X[te] @ w + (b or 0.0)
                sse += float(np.sum((y[te] - pred) ** 2))
            scores.append(sse / len(X))
        lam = grid[int(np.argmin(scores))]
        cv = {"folds": k, "lambda_grid": grid, "cv_mse": scores, "lambda": lam}
    w, b, s = _fit_fixed(X, y, lam, intercept, scale)
    return UtilityWeights(w, lam, s, names, b, method, cv)


# ---------------------------------------------------------------- supervision


@dataclass(eq=False)
class SupervisionSet:
    """Shapley-level rows (one per neighbor per target batch) and accuracy-level rows
    (one per permutation prefix). Feature columns always follow ``FEATURE_NAMES``."""

    nodes: np.ndarray
    batch: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    x_acc: np.ndarray
    acc: np.ndarray
    acc_batch: np.ndarray
    perm_lengths: list
    full_acc: np.ndarray  # per batch: target accuracy on the full validation graph
    full_conf: np.ndarray  # per batch: mean max-confidence on the full validation graph
    names: tuple = FEATURE_NAMES

    @property
    def rows_shapley(self) -> int:
        return len(self.phi)

    @property
    def rows_accuracy(self) -> int:
        return len(self.acc)

    def columns(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.names.index(n) for n in names], dtype=np.int64)

    @staticmethod
    def concat(parts: Sequence["SupervisionSet"]) -> "SupervisionSet":
        if len(parts) == 1:
            return parts[0]
        offs = np.cumsum([0] + [len(p.full_acc) for p in parts])
        return SupervisionSet(
            nodes=np.concatenate([p.nodes for p in parts]),
            batch=np.concatenate([p.batch + o for p, o in zip(parts, offs)]),
            psi=np.concatenate([p.psi for p in parts]),
            phi=np.concatenate([p.phi for p in parts]),
            x_acc=np.concatenate([p.x_acc for p in parts]),
            acc=np.concatenate([p.acc for p in parts]),
            acc_batch=np.concatenate([p.acc_batch + o for p, o in zip(parts, offs)]),
            perm_lengths=[n for p in parts for n in p.perm_lengths],
            full_acc=np.concatenate([p.full_acc for p in parts]),
            full_conf=np.concatenate([p.full_conf for p in parts]),
            names=parts[0].names,
        )


def build_supervision(
    g_val: Graph,
    val_targets,
    params: ModelParams,
    stats: TrainStats,
    perms: Sequence[Permutation],
    cfg: FeatureConfig = FeatureConfig(),
    workers: int = 1,
) -> SupervisionSet:
    """Trace ``perms`` with all features and true target accuracy as the utility."""
    targets = node_set(val_targets, g_val.n_nodes)
    if not g_val.has_label(targets):
        raise DataError("unlabeled validation target")
    full_cfg = FeatureConfig(cfg.lp_alpha, cfg.lp_iters, cfg.entropy_sign, cfg.classwise_agg, FEATURE_NAMES)
    extractor = FeatureExtractor.for_targets(g_val, params, stats, targets, full_cfg)
    utility = AccuracyUtility.from_graph(g_val, params, targets)
    traces = run_traces(g_val, targets, perms, extractor, utility, workers=workers)
    digest = perm_digest(perms)
    fs = feature_shapley_from_traces(traces, FEATURE_NAMES, digest)
    phi = scalar_shapley_from_traces(traces, digest=digest)
    full = split_view(g_val, targets)
    probs = forward(params, full)[full.local(targets)]
    x_acc = np.concatenate([t.features for t in traces])
    acc = np.concatenate([t.utility for t in traces])
    return SupervisionSet(
        nodes=fs.nodes,
        batch=np.zeros(len(fs.nodes), dtype=np.int64),
        psi=fs.psi,
        phi=phi.values,
        x_acc=x_acc,
        acc=acc,
        acc_batch=np.zeros(len(acc), dtype=np.int64),
        perm_lengths=[len(p) for p in perms],
        full_acc=np.array([utility(full)]),
        full_conf=np.array([probs.max(axis=1).mean()]),
    )


def target_batches(targets: np.ndarray, batch_size: int | None) -> list[np.ndarray]:
    if not batch_size or batch_size >= len(targets):
        return [targets]
    return [targets[i : i + batch_size] for i in range(0, len(targets), batch_size)]


def batch_seed(seed: int, batch: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(batch)]).generate_state(1)[0])


def build_supervision_batched(
    g_val: Graph,
    val_targets,
    params: ModelParams,
    stats: TrainStats,
    m: int,
    seed: int,
    batch_size: int | None = None,
    cfg: FeatureConfig = FeatureConfig(),
    workers: int = 1,
) -> SupervisionSet:
    """One joint game per batch of validation targets; rows pooled across batches.

    Batches whose neighborhood is empty contribute nothing.
    """
    targets = node_set(val_targets, g_val.n_nodes)
    parts = []
    for b, chunk in enumerate(target_batches(targets, batch_size)):
        try:
            perms = sample_permutations(g_val, chunk, params.k_hops, m, batch_seed(seed, b))
        except DataError:
            continue
        parts.append(build_supervision(g_val, chunk, params, stats, perms, cfg, workers))
    if not parts:
        raise DataError("no validation target batch has neighbors")
    return SupervisionSet.concat(parts)


def fit_sgul_shapley(
    sup: SupervisionSet,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    folds: int = 5,
    seed: int = 0,
    names: Sequence[str] = FEATURE_NAMES,
    scale: bool = True,
) -> UtilityWeights:
    """Fit w >= 0 so that w . psi_i tracks the validation Shapley values (no intercept)."""
    cols = sup.columns(names)
    return fit_weights(sup.psi[:, cols], sup.phi, lambda_grid, folds, seed, False, scale, names, "sgul-shapley")


def fit_sgul_accuracy(
    sup: SupervisionSet,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    folds: int = 5,
    seed: int = 0,
    names: Sequence[str] = FEATURE_NAMES,
    scale: bool = True,
) -> UtilityWeights:
    """Fit w >= 0 plus a free intercept on (prefix features, prefix accuracy) pairs."""
    if sup.rows_accuracy < 2:
        raise DataError("need at least two accuracy-level rows")
    cols = sup.columns(names)
    return fit_weights(sup.x_acc[:, cols], sup.acc, lambda_grid, folds, seed, True, scale, names, "sgul-accuracy")


def shapley_predictions(sup: SupervisionSet, w: UtilityWeights) -> np.ndarray:
    return sup.psi[:, sup.columns(w.feature_names)] @ w.w


# ---------------------------------------------------------------- baselines

BASELINES = ("atc-mc", "atc-ne", "doc", "max-conf", "class-conf")


@dataclass
class BaselineCalibration:
    variant: str
    t: float | None = None
    beta: float | None = None
    acc_val: float | None = None
    c_val: float | None = None

    def __post_init__(self):
        if self.variant not in BASELINES:
            raise DataError(f"unknown baseline {self.variant!r}")
        if self.variant.startswith("atc") and (self.t is None or not np.isfinite(self.t)):
            raise DataError("ATC needs a finite threshold")
        if self.variant == "doc" and (self.beta is None or not np.isfinite(self.beta)):
            raise DataError("DoC needs a finite beta")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "BaselineCalibration":
        return cls(**json.loads(Path(path).read_text()))


def confidence_scores(probs: np.ndarray, variant: str) -> np.ndarray:
    """Per-node ATC score: max probability, or -sum p ln p for the entropy variant."""
    probs = np.asarray(probs, dtype=np.float64)
    if variant == "atc-mc":
        return probs.max(axis=1)
    plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return -plogp.sum(axis=1)


def atc_threshold(scores, acc: float) -> float:
    """Threshold t such that the fraction of ``scores`` strictly above t equals ``acc``
    (up to rounding to a whole number of nodes)."""
    s = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    n = len(s)
    if n == 0:
        raise DataError("empty validation set")
    above = int(round(acc * n))
    if above <= 0:
        return float(s[0])
    if above >= n:
        return float(np.nextafter(s[-1], -np.inf))
    return float(0.5 * (s[above - 1] + s[above]))


def calibrate_atc(val_predictions, val_labels, variant: str = "atc-mc") -> BaselineCalibration:
    probs = np.asarray(val_predictions, dtype=np.float64)
    labels = np.asarray(val_labels)
    if len(labels) == 0:
        raise DataError("empty validation set")
    acc = float(np.mean(np.argmax(probs, axis=1) == labels))
    return BaselineCalibration(variant, t=atc_threshold(confidence_scores(probs, variant), acc), acc_val=acc)


def calibrate_doc(sup: SupervisionSet, acc_val: float, c_val: float) -> BaselineCalibration:
    """beta by least squares through the origin: (conf shift) -> (accuracy shift) over prefixes."""
    conf = sup.x_acc[:, FEATURE_NAMES.index("max_conf")]
    dx = conf - sup.full_conf[sup.acc_batch]
    dy = sup.acc - sup.full_acc[sup.acc_batch]
    denom = float(dx @ dx)
    beta = float(dx @ dy) / denom if denom > 0 else 0.0
    return BaselineCalibration("doc", beta=beta, acc_val=float(acc_val), c_val=float(c_val))


def calibrate_baselines(
    g_val: Graph, params: ModelParams, val_targets, sup: SupervisionSet, variants: Sequence[str] = BASELINES
) -> dict[str, BaselineCalibration]:
    labeled = g_val.split("val_labeled")
    full = split_view(g_val, labeled)
    probs = forward(params, full)
    out = {}
    for v in variants:
        if v.startswith("atc"):
            out[v] = calibrate_atc(probs[full.local(labeled)], g_val.labels[labeled], v)
        elif v == "doc":
            targets = node_set(val_targets, g_val.n_nodes)
            tp = probs[full.local(targets)]
            acc_val = float(np.mean(np.argmax(tp, axis=1) == g_val.labels[targets]))
            out[v] = calibrate_doc(sup, acc_val, float(tp.max(axis=1).mean()))
        else:
            out[v] = BaselineCalibration(v)
    return out


class BaselineUtility:
    """Scalar set utility for one calibrated baseline on a fixed target set."""

    def __init__(self, cal: BaselineCalibration, params: ModelParams, targets, fixed=None):
        self.cal = cal
        self.params = params
        self.targets = node_set(targets)
        self.fixed = None if fixed is None else np.asarray(fixed, dtype=np.int64)
        if cal.variant == "class-conf" and self.fixed is None:
            raise DataError("class confidence needs fixed labels")
        self.description = cal.variant

    def __call__(self, view: SubgraphView) -> float:
        return baseline_utility(self.cal, view, self.targets, self.params, self.fixed)


def baseline_utility(cal: BaselineCalibration, view: SubgraphView, targets, params: ModelParams, fixed=None) -> float:
    probs = forward(params, view)
    if cal.variant == "max-conf":
        return float(probs.max())
    tp = probs[view.local(targets)]
    if cal.variant in ("atc-mc", "atc-ne"):
        return float(np.mean(confidence_scores(tp, cal.variant) > cal.t))
    if cal.variant == "doc":
        return float(cal.acc_val + cal.beta * (tp.max(axis=1).mean() - cal.c_val))
    return float(tp[np.arange(len(tp)), np.asarray(fixed, dtype=np.int64)].mean())
