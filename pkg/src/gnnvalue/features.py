"""Label-free transferable features of a subgraph state.

Nine scalars summarise how the fixed model behaves on the target nodes of the
current view: three data-side similarity measures and six confidence measures.
Every feature is a total function of the view (empty edge sets and zero vectors
have defined values), so they can be evaluated on any permutation prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .graph import Graph, SubgraphView, induced_view, node_set, split_view
from .model import ModelParams, forward, label_propagation, mlp_forward, propagate

FEATURE_NAMES = (
    "edge_cos",
    "rep_dist",
    "classwise_rep_dist",
    "max_conf",
    "target_conf",
    "prop_max_conf",
    "prop_target_conf",
    "neg_entropy",
    "conf_gap",
)


@dataclass(frozen=True, eq=False)
class TrainStats:
    mean_train: np.ndarray  # (d,)
    prototypes: np.ndarray  # (C, d)


@dataclass(frozen=True)
class FeatureConfig:
    lp_alpha: float = 0.9
    lp_iters: int = 10
    # "prose": sum p ln p (higher = more certain); "literal": -sum p ln p
    entropy_sign: str = "prose"
    classwise_agg: str = "min"
    names: tuple = FEATURE_NAMES

    def __post_init__(self):
        if self.entropy_sign not in ("prose", "literal"):
            raise DataError("entropy_sign must be 'prose' or 'literal'")
        if self.classwise_agg not in ("min", "max"):
            raise DataError("classwise_agg must be 'min' or 'max'")
        unknown = set(self.names) - set(FEATURE_NAMES)
        if unknown:
            raise DataError(f"unknown features {sorted(unknown)}")

    @property
    def columns(self) -> np.ndarray:
        return np.array([FEATURE_NAMES.index(n) for n in self.names], dtype=np.int64)


def compute_train_stats(g: Graph, params: ModelParams) -> TrainStats:
    """Mean aggregated feature over all training nodes and per-class prototypes over labeled ones."""
    train = g.split("train")
    labeled = g.split("train_labeled")
    if train.size == 0:
        raise DataError("empty training split")
    view = induced_view(g, train) if not g.transductive else split_view(g, train)
    agg = propagate(view, view.features, params.k_hops)
    mean_train = agg[view.local(train)].mean(axis=0)
    y = g.labels[labeled] if labeled.size else np.zeros(0, dtype=np.int64)
    missing = [c for c in range(params.n_classes) if not np.any(y == c)]
    if missing:
        raise DataError(f"classes absent from train_labeled: {missing}")
    rows = agg[view.local(labeled)]
    protos = np.stack([rows[y == c].mean(axis=0) for c in range(params.n_classes)])
    return TrainStats(mean_train, protos)


def fixed_labels(g: Graph, params: ModelParams, targets) -> np.ndarray:
    """Predicted class of each target on its full split graph, frozen for the run."""
    targets = node_set(targets, g.n_nodes)
    view = split_view(g, targets)
    return np.argmax(forward(params, view)[view.local(targets)], axis=1)


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine; a zero vector gives 0."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dot = np.sum(a * b, axis=-1)
    return np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)


def extract(
    view: SubgraphView,
    targets,
    params: ModelParams,
    stats: TrainStats,
    fixed: np.ndarray,
    cfg: FeatureConfig = FeatureConfig(),
) -> np.ndarray:
    """Full 9-vector in ``FEATURE_NAMES`` order. ``fixed`` is aligned with sorted ``targets``."""
    t = view.local(targets)
    x = view.features.astype(np.float64)
    out = np.zeros(len(FEATURE_NAMES))

    r, c = view.local_edges
    if len(r):
        out[0] = _cos_rows(x[r], x[c]).mean()

    agg = propagate(view, x, params.k_hops)
    h = agg[t]
    out[1] = _cos_rows(h, stats.mean_train[None, :]).mean()
    per_class = _cos_rows(h[:, None, :], stats.prototypes[None, :, :])
    out[2] = (per_class.min(axis=1) if cfg.classwise_agg == "min" else per_class.max(axis=1)).mean()

    probs = forward(params, view)[t]
    rows = np.arange(len(t))
    fixed = np.asarray(fixed, dtype=np.int64)
    out[3] = probs.max(axis=1).mean()
    out[4] = probs[rows, fixed].mean()

    lp = label_propagation(view, mlp_forward(params, x), cfg.lp_alpha, cfg.lp_iters)[t]
    out[5] = lp.max(axis=1).mean()
    out[6] = lp[rows, fixed].mean()

    plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    neg_ent = plogp.sum(axis=1).mean()
    out[7] = neg_ent if cfg.entropy_sign == "prose" else -neg_ent

    if probs.shape[1] > 1:
        top2 = np.sort(probs, axis=1)[:, -2:]
        out[8] = (top2[:, 1] - top2[:, 0]).mean()
    else:
        out[8] = 1.0
    return out


class FeatureExtractor:
    """Binds model, train statistics and frozen labels for one target set.

    Calling an instance on a view returns the configured feature subset.
    """

    def __init__(self, params: ModelParams, stats: TrainStats, targets, fixed, cfg: FeatureConfig = FeatureConfig()):
        self.params = params
        self.stats = stats
        self.targets = node_set(targets)
        self.fixed = np.asarray(fixed, dtype=np.int64)
        if self.fixed.shape != self.targets.shape:
            raise DataError("fixed labels must align with targets")
        self.cfg = cfg
        self._cols = cfg.columns

    @classmethod
    def for_targets(cls, g: Graph, params: ModelParams, stats: TrainStats, targets, cfg: FeatureConfig = FeatureConfig()):
        targets = node_set(targets, g.n_nodes)
        return cls(params, stats, targets, fixed_labels(g, params, targets), cfg)

    @property
    def names(self) -> tuple:
        return tuple(self.cfg.names)

    def __call__(self, view: SubgraphView) -> np.ndarray:
        return extract(view, self.targets, self.params, self.stats, self.fixed, self.cfg)[self._cols]
