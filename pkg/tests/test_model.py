import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnnvalue.errors import DataError
from gnnvalue.graph import Graph, induced_view
from gnnvalue.model import (
    ModelParams,
    accuracy,
    forward,
    init_params,
    label_propagation,
    load_params,
    mlp_forward,
    normalize_adjacency,
    params_from_dict,
    params_to_dict,
    save_params,
    softmax,
    train_mlp,
)
from toys import path, random_params, single_split_graph


# ---------------------------------------------------------------- dense reference


def dense_a_hat(n, edges):
    a = np.eye(n)
    for u, v in edges:
        a[u, v] = a[v, u] = 1.0
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def dense_forward(params, x, a_hat):
    x = np.asarray(x, dtype=np.float64)
    ws = [w.astype(np.float64) for w, _ in params.layers]
    bs = [b.astype(np.float64) for _, b in params.layers]
    if params.conv == "sgc":
        h = np.linalg.matrix_power(a_hat, params.k_hops) @ x
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = h @ w.T + b
            if i < len(ws) - 1:
                h = np.maximum(h, 0)
    else:
        h = x
        n_prop = min(params.k_hops, len(ws))
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = (a_hat @ (h @ w.T) if i < n_prop else h @ w.T) + b
            if i < len(ws) - 1:
                h = np.maximum(h, 0)
    e = np.exp(h - h.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- normalization


def test_normalize_single_node():
    g = single_split_graph(1, [])
    assert normalize_adjacency(induced_view(g, [0])).toarray().tolist() == [[1.0]]


def test_normalize_two_connected():
    g = single_split_graph(2, [(0, 1)])
    assert np.allclose(normalize_adjacency(induced_view(g, [0, 1])).toarray(), 0.5)


def test_normalize_empty_edges_is_identity():
    g = single_split_graph(4, [])
    assert np.array_equal(normalize_adjacency(induced_view(g, range(4))).toarray(), np.eye(4))


def test_normalize_matches_dense():
    edges = [(0, 1), (1, 2), (1, 3), (3, 4)]
    g = single_split_graph(5, edges)
    assert np.allclose(normalize_adjacency(induced_view(g, range(5))).toarray(), dense_a_hat(5, edges))


# ---------------------------------------------------------------- forward


def test_three_node_path_sgc_hand_weights():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=np.float32)
    g = path(3, features=x)
    w1 = np.array([[1.0, -1.0], [0.5, 2.0], [-1.0, 0.0]], dtype=np.float32)
    b1 = np.array([0.1, 0.0, -0.2], dtype=np.float32)
    w2 = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]], dtype=np.float32)
    b2 = np.zeros(2, dtype=np.float32)
    params = ModelParams(((w1, b1), (w2, b2)), conv="sgc", k_hops=2, n_classes=2)
    a = dense_a_hat(3, [(0, 1), (1, 2)])
    h = a @ a @ x.astype(np.float64)
    z = np.maximum(h @ w1.T + b1, 0) @ w2.T + b2
    ref = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert np.allclose(forward(params, induced_view(g, range(3))), ref, atol=1e-12)


@pytest.mark.parametrize("conv", ["sgc", "gcn"])
@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("hidden", [(), (5,), (4, 3)])
def test_forward_matches_dense(conv, k, hidden):
    rng = np.random.default_rng(k * 7 + len(hidden))
    edges = [(0, 1), (1, 2), (2, 3), (0, 3), (3, 4), (5, 4)]
    g = single_split_graph(6, edges, features=rng.standard_normal((6, 3)))
    params = random_params(3, 3, hidden=hidden, conv=conv, k=k, seed=k)
    got = forward(params, induced_view(g, range(6)))
    ref = dense_forward(params, g.features, dense_a_hat(6, edges))
    assert np.allclose(got, ref, atol=1e-10)


@pytest.mark.parametrize("conv", ["sgc", "gcn"])
def test_empty_edges_equal_mlp(conv):
    g = single_split_graph(5, [(0, 1), (2, 3)])
    params = random_params(3, 2, conv=conv, k=2)
    view = induced_view(g, [0, 2, 4])
    assert view.n_edges == 0
    assert np.allclose(forward(params, view), mlp_forward(params, g.features[[0, 2, 4]]), atol=1e-6)
    single = induced_view(g, [1])
    assert np.allclose(forward(params, single), mlp_forward(params, g.features[[1]]), atol=1e-6)


def test_forward_dimension_mismatch():
    g = single_split_graph(2, [(0, 1)], d=3)
    with pytest.raises(DataError, match="dim"):
        forward(random_params(4, 2), induced_view(g, [0, 1]))


@pytest.mark.parametrize("conv", ["sgc", "gcn"])
def test_locality_far_nodes(conv):
    # target 0 with a 2-hop chain; node 4 sits at distance 4 and node 5 is disconnected
    rng = np.random.default_rng(1)
    g = single_split_graph(6, [(0, 1), (1, 2), (2, 3), (3, 4)], features=rng.standard_normal((6, 3)))
    params = random_params(3, 3, conv=conv, k=2)
    near = forward(params, induced_view(g, [0, 1, 2, 3]))[0]
    far = forward(params, induced_view(g, [0, 1, 2, 3, 4, 5]))[0]
    assert np.allclose(near, far, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["sgc", "gcn"]))
def test_rows_are_distributions(seed, conv):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < 0.4
    g = single_split_graph(n, np.stack([iu[keep], ju[keep]], 1), features=rng.standard_normal((n, 3)) * 5)
    p = forward(random_params(3, 4, conv=conv, k=int(rng.integers(1, 4)), seed=seed, scale=3.0),
                induced_view(g, range(n)))
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-5)


# ---------------------------------------------------------------- label propagation


def test_lp_empty_edges_identity():
    g = single_split_graph(3, [])
    init = softmax(np.random.default_rng(0).standard_normal((3, 4)))
    for alpha, iters in [(0.1, 1), (0.9, 10), (0.5, 50)]:
        assert np.allclose(label_propagation(induced_view(g, range(3)), init, alpha, iters), init, atol=1e-12)


def test_lp_zero_iters_identity():
    g = path(3)
    init = softmax(np.random.default_rng(1).standard_normal((3, 2)))
    assert np.array_equal(label_propagation(induced_view(g, range(3)), init, 0.9, 0), init)


def test_lp_two_nodes_hand_computation():
    # A_hat entries are all 0.5, so P = 0.5 * [[.5,.5],[.5,.5]] + 0.5 * I
    g = single_split_graph(2, [(0, 1)])
    out = label_propagation(induced_view(g, [0, 1]), np.eye(2), alpha=0.5, iters=1)
    assert np.allclose(out, [[0.75, 0.25], [0.25, 0.75]])
    # the two rows mirror each other
    assert np.allclose(out[0], out[1][::-1])


def test_lp_matches_dense_loop():
    edges = [(0, 1), (1, 2), (2, 3)]
    g = single_split_graph(4, edges)
    init = softmax(np.random.default_rng(2).standard_normal((4, 3)))
    a = dense_a_hat(4, edges)
    p = init.copy()
    for _ in range(7):
        p = 0.8 * a @ p + 0.2 * init
    p /= p.sum(axis=1, keepdims=True)
    assert np.allclose(label_propagation(induced_view(g, range(4)), init, 0.8, 7), p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.99), st.integers(0, 20))
def test_lp_rows_stay_distributions(seed, alpha, iters):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < 0.5
    g = single_split_graph(n, np.stack([iu[keep], ju[keep]], 1))
    init = softmax(rng.standard_normal((n, 3)) * 3)
    out = label_propagation(induced_view(g, range(n)), init, alpha, iters)
    assert np.all(out >= 0) and np.allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_lp_alpha_range():
    g = path(2)
    with pytest.raises(DataError):
        label_propagation(induced_view(g, [0, 1]), np.eye(2), alpha=1.0)


# ---------------------------------------------------------------- accuracy


def test_accuracy_examples():
    pred = np.eye(4)
    assert accuracy(pred, [0, 1, 2, 3]) == 1.0
    assert accuracy(pred, [0, 1, 0, 0]) == 0.5
    with pytest.raises(DataError, match="empty evaluation set"):
        accuracy(np.zeros((0, 2)), [])
    with pytest.raises(DataError):
        accuracy(pred, [0, 1, 2, -1])


def test_accuracy_ties_to_lowest_class():
    assert accuracy(np.array([[0.5, 0.5]]), [0]) == 1.0


# ---------------------------------------------------------------- training


def _two_clusters(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = rng.standard_normal((n, 2)) * 0.3 + np.where(y[:, None] == 0, -2.0, 2.0)
    splits = {"train": np.arange(n), "train_labeled": np.arange(n)}
    return Graph.from_edges(n, [], x, y, splits, transductive=True)


def test_train_separable_clusters():
    g = _two_clusters()
    params = train_mlp(g, hidden_dims=(8,), epochs=200, lr=0.1, seed=0)
    probs = mlp_forward(params, g.features)
    assert accuracy(probs, g.labels) >= 0.99


def test_train_zero_epochs_is_init():
    g = _two_clusters(20)
    params = train_mlp(g, hidden_dims=(4,), epochs=0, seed=5)
    ref = init_params([2, 4, 2], "sgc", 2, np.random.default_rng(5))
    for (w, b), (rw, rb) in zip(params.layers, ref.layers):
        assert np.array_equal(w, rw) and np.array_equal(b, rb)


def test_train_deterministic():
    g = _two_clusters(40)
    a = train_mlp(g, hidden_dims=(4,), epochs=20, seed=3)
    b = train_mlp(g, hidden_dims=(4,), epochs=20, seed=3)
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a.layers, b.layers))


def test_train_needs_labels():
    g = Graph.from_edges(2, [], np.zeros((2, 1)), None, {"train": [0, 1]}, transductive=True)
    with pytest.raises(DataError, match="no labeled training nodes"):
        train_mlp(g)


def test_pmlp_ignores_edges_in_training():
    g = _two_clusters(40)
    wired = Graph.from_edges(40, [(i, i + 1) for i in range(39)], g.features, g.labels,
                             {"train": np.arange(40), "train_labeled": np.arange(40)}, transductive=True)
    a = train_mlp(g, hidden_dims=(4,), epochs=10, seed=1)
    b = train_mlp(wired, hidden_dims=(4,), epochs=10, seed=1)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a.layers, b.layers))
    c = train_mlp(wired, hidden_dims=(4,), epochs=10, seed=1, propagate_in_training=True)
    assert not all(np.array_equal(x[0], y[0]) for x, y in zip(a.layers, c.layers))


@pytest.mark.parametrize("conv", ["sgc", "gcn"])
def test_transductive_gradient_matches_numeric(conv):
    # one full-batch step with propagation must follow the analytic gradient of the loss
    rng = np.random.default_rng(0)
    n = 6
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]
    x = rng.standard_normal((n, 3))
    y = rng.integers(0, 2, n)
    splits = {"train": np.arange(n), "train_labeled": np.arange(n)}
    g = Graph.from_edges(n, edges, x, y, splits, transductive=True)
    p0 = train_mlp(g, hidden_dims=(4,), epochs=0, seed=2, conv=conv, k_hops=2, n_classes=2)
    p1 = train_mlp(g, hidden_dims=(4,), epochs=1, lr=1e-3, seed=2, conv=conv, k_hops=2, n_classes=2,
                   propagate_in_training=True)
    a = dense_a_hat(n, edges)

    def loss(params):
        probs = dense_forward(params, g.features, a)
        return -np.mean(np.log(probs[np.arange(n), y]))

    w0 = p0.layers[0][0].astype(np.float64)
    step = (p1.layers[0][0].astype(np.float64) - w0) / -1e-3
    eps = 1e-5
    for i, j in [(0, 0), (1, 2), (3, 1)]:
        up = [list(l) for l in p0.layers]
        dn = [list(l) for l in p0.layers]
        wu, wd = w0.copy(), w0.copy()
        wu[i, j] += eps
        wd[i, j] -= eps
        up[0][0], dn[0][0] = wu, wd
        pu = ModelParams(tuple(map(tuple, up)), conv=conv, k_hops=2, n_classes=2)
        pd = ModelParams(tuple(map(tuple, dn)), conv=conv, k_hops=2, n_classes=2)
        numeric = (loss(pu) - loss(pd)) / (2 * eps)
        assert step[i, j] == pytest.approx(numeric, abs=2e-3)


# ---------------------------------------------------------------- model file


def test_model_file_roundtrip(tmp_path):
    params = random_params(3, 2, hidden=(5,), conv="gcn", k=3, seed=9)
    save_params(params, tmp_path / "m.json")
    back = load_params(tmp_path / "m.json")
    assert back.conv == "gcn" and back.k_hops == 3 and back.layer_dims == [3, 5, 2]
    for (w, b), (bw, bb) in zip(params.layers, back.layers):
        assert w.tobytes() == bw.tobytes() and b.tobytes() == bb.tobytes()


def test_model_file_decimal_encoding():
    params = random_params(2, 2, hidden=(), seed=4)
    d = params_to_dict(params)
    d["encoding"] = "decimal"
    d["weights"] = [w.tolist() for w, _ in params.layers]
    d["biases"] = [b.tolist() for _, b in params.layers]
    back = params_from_dict(json.loads(json.dumps(d)))
    assert back.layers[0][0].tobytes() == params.layers[0][0].tobytes()


def test_params_validation():
    w = np.zeros((2, 3), dtype=np.float32)
    with pytest.raises(DataError):
        ModelParams(((w, np.zeros(2, np.float32)), (np.zeros((2, 4), np.float32), np.zeros(2, np.float32))),
                    conv="sgc", k_hops=1, n_classes=2)
    with pytest.raises(DataError):
        ModelParams(((w, np.zeros(2, np.float32)),), conv="sgc", k_hops=0, n_classes=2)
    with pytest.raises(DataError):
        ModelParams(((w, np.zeros(2, np.float32)),), conv="gat", k_hops=1, n_classes=2)
