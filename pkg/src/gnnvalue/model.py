"""Fixed node classifier: an MLP trained on raw features, with SGC- or GCN-style
message passing switched on at inference time.

Weights are stored as float32; all arithmetic runs in float64.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError, NumericError
from .graph import Graph, SubgraphView, induced_view

log = logging.getLogger(__name__)

CONVS = ("sgc", "gcn")


@dataclass(frozen=True, eq=False)
class ModelParams:
    layers: tuple  # ((W: out x in float32, b: out float32), ...)
    conv: str = "sgc"
    k_hops: int = 2
    n_classes: int = 0

    def __post_init__(self):
        if self.conv not in CONVS:
            raise DataError(f"unknown conv {self.conv!r}")
        if self.k_hops < 1:
            raise DataError("k_hops must be >= 1")
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w1.shape[1] != w0.shape[0]:
                raise DataError("layer dimensions do not chain")
        if not self.n_classes:
            object.__setattr__(self, "n_classes", self.layers[-1][0].shape[0])
        if self.layers[-1][0].shape[0] != self.n_classes:
            raise DataError("final layer width must equal n_classes")

    @property
    def layer_dims(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def n_propagations(self) -> int:
        """Propagation steps actually applied (GCN interleaves one per layer)."""
        return self.k_hops if self.conv == "sgc" else min(self.k_hops, len(self.layers))


def normalize_adjacency(view: SubgraphView) -> sp.csr_matrix:
    """Symmetric normalized operator D^-1/2 (A + I) D^-1/2 over the view's active nodes."""
    cached = view.cache.get("norm_adj")
    if cached is not None:
        return cached
    a = view.adjacency
    n = view.n_nodes
    deg = np.asarray(a.sum(axis=1)).ravel() + 1.0
    inv = 1.0 / np.sqrt(deg)
    r, c = view.local_edges
    rows = np.concatenate([r, c, np.arange(n)])
    cols = np.concatenate([c, r, np.arange(n)])
    vals = inv[rows] * inv[cols]
    out = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    view.cache["norm_adj"] = out
    return out


def propagate(view: SubgraphView, x: np.ndarray, k: int) -> np.ndarray:
    """Apply the normalized operator ``k`` times."""
    out = np.asarray(x, dtype=np.float64)
    if view.n_edges == 0:
        return out.copy()
    a_hat = normalize_adjacency(view)
    for _ in range(k):
        out = a_hat @ out
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite model logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _mlp_logits(params: ModelParams, h: np.ndarray, a_hat=None, n_prop: int = 0) -> np.ndarray:
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = h @ w.astype(np.float64).T
        if a_hat is not None and i < n_prop:
            z = a_hat @ z
        z = z + b.astype(np.float64)
        h = np.maximum(z, 0.0) if i < last else z
    return h


def mlp_forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Plain MLP probabilities, no message passing."""
    return softmax(_mlp_logits(params, np.asarray(x, dtype=np.float64)))


def forward(params: ModelParams, view: SubgraphView) -> np.ndarray:
    """Class probabilities for every active node of ``view`` (rows follow ``view.active``)."""
    x = view.features
    if x.shape[1] != params.layer_dims[0]:
        raise DataError(f"feature dim {x.shape[1]} != model input dim {params.layer_dims[0]}")
    x = x.astype(np.float64)
    if view.n_edges == 0:
        return mlp_forward(params, x)
    if params.conv == "sgc":
        return softmax(_mlp_logits(params, propagate(view, x, params.k_hops)))
    return softmax(_mlp_logits(params, x, normalize_adjacency(view), params.n_propagations))


def label_propagation(view: SubgraphView, init: np.ndarray, alpha: float = 0.9, iters: int = 10) -> np.ndarray:
    """Iterate P <- alpha * A_hat P + (1 - alpha) P0, then renormalize rows."""
    if not 0.0 < alpha < 1.0:
        raise DataError("alpha must lie in (0, 1)")
    p0 = np.asarray(init, dtype=np.float64)
    if iters == 0 or view.n_edges == 0:
        return p0.copy()
    a_hat = normalize_adjacency(view)
    p = p0
    for _ in range(iters):
        p = alpha * (a_hat @ p) + (1.0 - alpha) * p0
    return p / p.sum(axis=1, keepdims=True)


def accuracy(pred: np.ndarray, labels, nodes=None) -> float:
    """Fraction of rows whose argmax (lowest index on ties) matches ``labels``.

    ``pred`` rows and ``labels`` must already be aligned with ``nodes``.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("empty evaluation set")
    if np.any(labels < 0):
        raise DataError("unlabeled node in evaluation set")
    return float(np.mean(np.argmax(pred, axis=1) == labels))


# ---------------------------------------------------------------- training


def init_params(dims: list[int], conv: str, k_hops: int, rng: np.random.Generator) -> ModelParams:
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(np.float32)
        layers.append((w, np.zeros(fan_out, dtype=np.float32)))
    return ModelParams(tuple(layers), conv=conv, k_hops=k_hops, n_classes=dims[-1])


def train_mlp(
    g: Graph,
    hidden_dims=(32,),
    epochs: int = 200,
    lr: float = 0.1,
    seed: int = 0,
    conv: str = "sgc",
    k_hops: int = 2,
    batch_size: int = 32,
    n_classes: int | None = None,
    propagate_in_training: bool = False,
    history: list | None = None,
) -> ModelParams:
    """Cross-entropy gradient descent on ``train_labeled`` nodes.

    By default the graph is ignored during training (PMLP); message passing only
    happens in :func:`forward`. With ``propagate_in_training`` the full GNN is
    trained transductively over the training split graph, full batch.
    """
    nodes = g.split("train_labeled")
    if nodes.size == 0:
        raise DataError("no labeled training nodes")
    y = g.labels[nodes]
    n_classes = n_classes or g.n_classes
    dims = [g.n_features, *hidden_dims, n_classes]
    rng = np.random.default_rng(seed)
    params = init_params(dims, conv, k_hops, rng)
    if epochs == 0:
        return params
    ws = [w.astype(np.float64) for w, _ in params.layers]
    bs = [b.astype(np.float64) for _, b in params.layers]
    onehot = np.eye(n_classes)[y]

    if propagate_in_training:
        view = induced_view(g, g.partition_nodes(nodes))
        x_all = view.features.astype(np.float64)
        rows = view.local(nodes)
        a_hat = normalize_adjacency(view)
        if conv == "sgc":
            x_all = propagate(view, x_all, k_hops)
            a_hat, n_prop = None, 0
        else:
            n_prop = min(k_hops, len(ws))
        for epoch in range(epochs):
            loss = _gd_step(ws, bs, x_all, onehot, lr, rows=rows, a_hat=a_hat, n_prop=n_prop)
            if history is not None:
                history.append(loss)
    else:
        x = g.features[nodes].astype(np.float64)
        n = len(nodes)
        bsz = min(batch_size, n) if batch_size else n
        for epoch in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bsz):
                idx = order[start : start + bsz]
                total += _gd_step(ws, bs, x[idx], onehot[idx], lr) * len(idx)
            if history is not None:
                history.append(total / n)
    if not all(np.all(np.isfinite(a)) for a in ws + bs):
        raise NumericError("training diverged; lower the learning rate")
    layers = tuple((w.astype(np.float32), b.astype(np.float32)) for w, b in zip(ws, bs))
    return ModelParams(layers, conv=conv, k_hops=k_hops, n_classes=n_classes)


def _gd_step(ws, bs, x, onehot, lr, rows=None, a_hat=None, n_prop=0) -> float:
    """One in-place gradient step; returns mean cross-entropy before the update."""
    acts, pres = [x], []
    h = x
    last = len(ws) - 1
    for i, (w, b) in enumerate(zip(ws, bs)):
        z = h @ w.T
        if a_hat is not None and i < n_prop:
            z = a_hat @ z
        z = z + b
        pres.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    logits = acts[-1] if rows is None else acts[-1][rows]
    p = softmax(logits)
    m = len(p)
    loss = float(-np.mean(np.log(np.clip((p * onehot).sum(axis=1), 1e-300, None))))
    dz = (p - onehot) / m
    if rows is not None:
        full = np.zeros_like(acts[-1])
        full[rows] = dz
        dz = full
    for i in range(last, -1, -1):
        if i < last:
            dz = dz * (pres[i] > 0)
        gb = dz.sum(axis=0)
        if a_hat is not None and i < n_prop:
            dz = a_hat.T @ dz
        gw = dz.T @ acts[i]
        if i > 0:
            dz_prev = dz @ ws[i]
        ws[i] -= lr * gw
        bs[i] -= lr * gb
        if i > 0:
            dz = dz_prev
    return loss


# ---------------------------------------------------------------- model file


def _enc(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _dec(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").reshape(shape).astype(np.float32)


def params_to_dict(params: ModelParams) -> dict:
    return {
        "conv": params.conv,
        "k_hops": params.k_hops,
        "n_classes": params.n_classes,
        "layer_dims": params.layer_dims,
        "encoding": "base64-f32le",
        "weights": [_enc(w) for w, _ in params.layers],
        "biases": [_enc(b) for _, b in params.layers],
    }


def params_from_dict(d: dict) -> ModelParams:
    dims = d["layer_dims"]
    layers = []
    for i, (ws, bs) in enumerate(zip(d["weights"], d["biases"])):
        if d.get("encoding", "base64-f32le") == "decimal":
            w = np.asarray(ws, dtype=np.float32).reshape(dims[i + 1], dims[i])
            b = np.asarray(bs, dtype=np.float32).reshape(dims[i + 1])
        else:
            w = _dec(ws, (dims[i + 1], dims[i]))
            b = _dec(bs, (dims[i + 1],))
        layers.append((w, b))
    return ModelParams(tuple(layers), conv=d["conv"], k_hops=int(d["k_hops"]), n_classes=int(d["n_classes"]))


def save_params(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params), indent=1) + "\n")


def load_params(path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()))
