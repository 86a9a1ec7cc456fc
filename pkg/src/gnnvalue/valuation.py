"""Structure-aware Shapley estimation over precedence-valid permutations.

Every estimator here works from *traces*: a permutation is walked from the
targets-only view (the empty coalition) to the full neighborhood, recording the
feature vector and/or a scalar utility at every prefix. Marginals are the
successive differences of a trace, and estimates are averages over the
permutation list, reduced in permutation-index order so results do not depend
on how many worker processes produced the traces.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, NumericError
from .graph import Graph, SubgraphView, induced_view, node_set
from .model import ModelParams, forward
from .perms import Permutation, sample_permutations, validate

MEMO_MAX_PLAYERS = 12


@dataclass(eq=False)
class MarginalTrace:
    """Prefix states of one permutation; row j is the state after j insertions."""

    perm_index: int
    order: tuple
    features: np.ndarray | None  # (L + 1, d)
    utility: np.ndarray | None  # (L + 1,)

    def steps(self):
        for j, node in enumerate(self.order):
            f = self.features
            u = self.utility
            yield (
                node,
                None if f is None else f[j],
                None if f is None else f[j + 1],
                None if u is None else u[j],
                None if u is None else u[j + 1],
            )


@dataclass(eq=False)
class FeatureShapley:
    """Per-neighbor vectors of per-feature Shapley estimates (one row per node)."""

    nodes: np.ndarray
    psi: np.ndarray
    m: int
    names: tuple
    perm_digest: str = ""

    def vector(self, node: int) -> np.ndarray:
        return self.psi[int(np.searchsorted(self.nodes, node))]


@dataclass(eq=False)
class ValueReport:
    nodes: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)
    stderr: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {int(n): float(v) for n, v in zip(self.nodes, self.values)}

    def value(self, node: int) -> float:
        return float(self.values[int(np.searchsorted(self.nodes, node))])


def perm_digest(perms: Sequence[Permutation]) -> str:
    h = hashlib.sha256()
    for p in perms:
        h.update(repr((p.order, p.targets, p.hop_bound)).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- utilities


class AccuracyUtility:
    """Accuracy of the fixed model on the labeled targets of a view."""

    def __init__(self, params: ModelParams, targets, labels):
        self.params = params
        self.targets = node_set(targets)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.shape != self.targets.shape:
            raise DataError("labels must align with targets")
        if np.any(self.labels < 0):
            raise DataError("unlabeled target node")

    @classmethod
    def from_graph(cls, g: Graph, params: ModelParams, targets):
        targets = node_set(targets, g.n_nodes)
        if not g.has_label(targets):
            raise DataError("unlabeled target node")
        return cls(params, targets, g.labels[targets])

    def __call__(self, view: SubgraphView) -> float:
        probs = forward(self.params, view)[view.local(self.targets)]
        return float(np.mean(np.argmax(probs, axis=1) == self.labels))

    description = "accuracy"


class LinearUtility:
    """U(S) = w . x(S) + intercept, with x from a feature extractor."""

    def __init__(self, extractor, w, intercept: float = 0.0):
        self.extractor = extractor
        self.w = np.asarray(w, dtype=np.float64)
        self.intercept = float(intercept)

    def __call__(self, view: SubgraphView) -> float:
        return float(self.w @ self.extractor(view) + self.intercept)

    description = "linear"


# ---------------------------------------------------------------- tracing


def trace_permutation(
    g: Graph,
    targets,
    perm: Permutation,
    extractor: Callable | None = None,
    scalar_utility: Callable | None = None,
    perm_index: int = 0,
    memo: dict | None = None,
    check: bool = True,
) -> MarginalTrace:
    """Walk ``perm`` from the targets-only view, recording every prefix state.

    Views are extended one node at a time. ``memo`` (keyed by the admitted set)
    lets repeated prefixes skip evaluation, which pays off on small games.
    """
    targets = node_set(targets, g.n_nodes)
    if check and not validate(g, perm):
        raise DataError(f"invalid permutation {perm.order}")
    view = induced_view(g, targets)
    feats, utils = [], []
    prefix: frozenset = frozenset()

    def record(v):
        key = prefix if memo is not None else None
        if key is not None and key in memo:
            f, u = memo[key]
        else:
            f = None if extractor is None else np.asarray(extractor(v), dtype=np.float64)
            u = None if scalar_utility is None else float(scalar_utility(v))
            if u is not None and not np.isfinite(u):
                raise NumericError(f"utility returned non-finite value {u}")
            if key is not None:
                memo[key] = (f, u)
        feats.append(f)
        utils.append(u)

    record(view)
    for node in perm.order:
        view = view.add(node)
        if memo is not None:
            prefix = prefix | {int(node)}
        record(view)
    return MarginalTrace(
        perm_index,
        tuple(int(v) for v in perm.order),
        None if extractor is None else np.stack(feats),
        None if scalar_utility is None else np.asarray(utils),
    )


def _trace_chunk(args):
    g, targets, chunk, extractor, utility, memoize = args
    memo = {} if memoize else None
    return [trace_permutation(g, targets, p, extractor, utility, i, memo=memo) for i, p in chunk]


def run_traces(
    g: Graph,
    targets,
    perms: Sequence[Permutation],
    extractor: Callable | None = None,
    scalar_utility: Callable | None = None,
    workers: int = 1,
    memoize: bool | None = None,
) -> list[MarginalTrace]:
    """Trace every permutation; output order always follows ``perms``."""
    if not perms:
        raise DataError("need at least one permutation")
    lengths = {len(p) for p in perms}
    if len(lengths) != 1:
        raise DataError("mixed-length permutations")
    if memoize is None:
        memoize = lengths.pop() <= MEMO_MAX_PLAYERS
    indexed = list(enumerate(perms))
    if workers <= 1 or len(perms) < 2:
        return _trace_chunk((g, targets, indexed, extractor, scalar_utility, memoize))
    n_chunks = min(workers, len(perms))
    size = -(-len(perms) // n_chunks)
    chunks = [indexed[i : i + size] for i in range(0, len(indexed), size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(_trace_chunk, [(g, targets, c, extractor, scalar_utility, memoize) for c in chunks])
        return [t for part in parts for t in part]


def _players(traces: Sequence[MarginalTrace]) -> np.ndarray:
    return np.array(sorted(traces[0].order), dtype=np.int64)


def _accumulate(traces, nodes, series) -> tuple[np.ndarray, np.ndarray]:
    """Sum and sum-of-squares of marginals per node, in permutation order."""
    first = series(traces[0])
    shape = (len(nodes),) + first.shape[1:]
    total = np.zeros(shape)
    sq = np.zeros(shape)
    for tr in traces:
        marg = np.diff(series(tr), axis=0)
        pos = np.searchsorted(nodes, np.asarray(tr.order, dtype=np.int64))
        if len(pos) != len(nodes) or np.any(nodes[pos] != np.asarray(tr.order)):
            raise DataError("permutations do not cover the same players")
        total[pos] += marg
        sq[pos] += marg * marg
    return total, sq


def feature_shapley_from_traces(traces, names=(), digest: str = "") -> FeatureShapley:
    nodes = _players(traces)
    total, _ = _accumulate(traces, nodes, lambda t: t.features)
    return FeatureShapley(nodes, total / len(traces), len(traces), tuple(names), digest)


def scalar_shapley_from_traces(traces, meta=None, digest: str = "") -> ValueReport:
    nodes = _players(traces)
    m = len(traces)
    total, sq = _accumulate(traces, nodes, lambda t: t.utility)
    mean = total / m
    var = np.maximum(sq / m - mean * mean, 0.0) * (m / (m - 1) if m > 1 else 0.0)
    meta = dict(meta or {})
    meta.setdefault("M", m)
    meta["perm_digest"] = digest
    return ValueReport(nodes, mean, meta, np.sqrt(var / m))


def feature_shapley(g: Graph, targets, perms, extractor, workers: int = 1) -> FeatureShapley:
    """Per-feature Shapley estimates: mean marginal of each feature over ``perms``."""
    traces = run_traces(g, targets, perms, extractor=extractor, workers=workers)
    return feature_shapley_from_traces(traces, getattr(extractor, "names", ()), perm_digest(perms))


def scalar_shapley(g: Graph, targets, perms, utility, workers: int = 1, meta=None) -> ValueReport:
    """Mean marginal of a scalar set utility over ``perms`` (with standard errors)."""
    traces = run_traces(g, targets, perms, scalar_utility=utility, workers=workers)
    meta = dict(meta or {})
    meta.setdefault("utility", getattr(utility, "description", type(utility).__name__))
    return scalar_shapley_from_traces(traces, meta, perm_digest(perms))


def decompose_check(w, psi: FeatureShapley, phis: ValueReport) -> float:
    """max_i |phi_i - w . psi_i| for phis computed from the linear utility on the same permutations."""
    if psi.m != phis.meta.get("M") or (psi.perm_digest and psi.perm_digest != phis.meta.get("perm_digest")):
        raise DataError("permutation-set mismatch")
    if not np.array_equal(psi.nodes, phis.nodes):
        raise DataError("node sets differ")
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    if len(phis.nodes) == 0:
        return 0.0
    return float(np.max(np.abs(phis.values - psi.psi @ w)))


def exact_shapley(g: Graph, targets, weighted_perms, utility) -> np.ndarray:
    """Weighted average of marginals over enumerated orders (weights need not be normalised)."""
    traces = run_traces(g, targets, [p for p, _ in weighted_perms], scalar_utility=utility, memoize=True)
    nodes = _players(traces)
    wts = np.array([w for _, w in weighted_perms], dtype=np.float64)
    wts = wts / wts.sum()
    out = np.zeros(len(nodes))
    for tr, wt in zip(traces, wts):
        out[np.searchsorted(nodes, np.asarray(tr.order))] += wt * np.diff(tr.utility)
    return out


def estimate_test_values(
    g_test: Graph,
    targets,
    w,
    m: int,
    seed: int,
    extractor,
    workers: int = 1,
    perms: Sequence[Permutation] | None = None,
    method: str = "sgul-shapley",
) -> tuple[ValueReport, FeatureShapley]:
    """Values under the learned linear utility, computed as w . psi_i.

    Returns the report and the feature-Shapley matrix it came from.
    """
    targets = node_set(targets, g_test.n_nodes)
    k = extractor.params.k_hops
    if perms is None:
        perms = sample_permutations(g_test, targets, k, m, seed)
    psi = feature_shapley(g_test, targets, perms, extractor, workers)
    wv = np.asarray(getattr(w, "w", w), dtype=np.float64)
    meta = {"method": method, "M": len(perms), "seed": int(seed), "utility": "linear", "perm_digest": psi.perm_digest}
    return ValueReport(psi.nodes, psi.psi @ wv, meta), psi
