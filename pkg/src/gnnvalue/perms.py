"""Precedence-constrained permutations of a target set's k-hop neighbors.

A permutation is valid when every neighbor, at the moment it is inserted, is
adjacent to a target or to a neighbor inserted before it. The sampler grows a
frontier from the targets and picks uniformly from it; note that this process
is not uniform over the set of valid orders, so :func:`order_probability`
gives the exact law of the sampler for oracle use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import Graph, k_hop_neighborhood, node_set

DEFAULT_ENUM_LIMIT = 8


@dataclass(frozen=True)
class Permutation:
    order: tuple
    targets: tuple
    hop_bound: int

    def __len__(self):
        return len(self.order)


def permutation_rng(master_seed: int, index: int) -> np.random.Generator:
    """Per-permutation generator; depends only on (master_seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


def _player_adjacency(g: Graph, targets: np.ndarray, players: np.ndarray) -> tuple[dict, list]:
    """Neighbor lists restricted to the players, plus the players touching a target."""
    pset = set(players.tolist())
    tset = set(targets.tolist())
    adj = {int(v): sorted(int(u) for u in g.neighbors(v) if int(u) in pset) for v in players}
    first = sorted(int(v) for v in players if any(int(u) in tset for u in g.neighbors(v)))
    return adj, first


def sample_permutation(g: Graph, targets, k: int, seed, players=None) -> Permutation:
    """Draw one valid full-length order by frontier growth.

    ``seed`` may be an int or a ``numpy.random.Generator``. ``players`` lets
    callers reuse a precomputed neighborhood.
    """
    targets = node_set(targets, g.n_nodes)
    players = k_hop_neighborhood(g, targets, k) if players is None else players
    if len(players) == 0:
        raise DataError("no players: empty neighborhood")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    adj, first = _player_adjacency(g, targets, players)
    return Permutation(tuple(_frontier_walk(adj, first, rng)), tuple(targets.tolist()), k)


def _frontier_walk(adj: dict, first: list, rng: np.random.Generator) -> list:
    active = list(first)  # kept sorted so draws are reproducible
    seen = set(first)
    order = []
    while active:
        v = active.pop(int(rng.integers(len(active))))
        order.append(v)
        for u in adj[v]:
            if u not in seen:
                seen.add(u)
                active.insert(int(np.searchsorted(active, u)), u)
    return order


def sample_permutations(g: Graph, targets, k: int, m: int, master_seed: int) -> list[Permutation]:
    """``m`` permutations, the i-th drawn from ``permutation_rng(master_seed, i)``."""
    targets = node_set(targets, g.n_nodes)
    players = k_hop_neighborhood(g, targets, k)
    if len(players) == 0:
        raise DataError("no players: empty neighborhood")
    adj, first = _player_adjacency(g, targets, players)
    t = tuple(targets.tolist())
    return [Permutation(tuple(_frontier_walk(adj, first, permutation_rng(master_seed, i))), t, k) for i in range(m)]


def enumerate_permutations(g: Graph, targets, k: int, cap: int | None = None) -> list[Permutation]:
    """All valid full-length orders, lexicographically sorted by node id."""
    return [p for p, _ in enumerate_with_probability(g, targets, k, cap)]


def enumerate_with_probability(g: Graph, targets, k: int, cap: int | None = None) -> list[tuple[Permutation, float]]:
    """Valid orders paired with the probability that the frontier sampler emits them."""
    targets = node_set(targets, g.n_nodes)
    players = k_hop_neighborhood(g, targets, k)
    if cap is None and len(players) > DEFAULT_ENUM_LIMIT:
        raise DataError(f"too many neighbors to enumerate ({len(players)} > {DEFAULT_ENUM_LIMIT}); pass cap")
    adj, first = _player_adjacency(g, targets, players)
    t = tuple(targets.tolist())
    out: list[tuple[Permutation, float]] = []
    order: list[int] = []

    def rec(frontier: list, seen: set, prob: float):
        if not frontier:
            if len(order) == len(players):
                if cap is not None and len(out) >= cap:
                    raise DataError(f"permutation count exceeds cap {cap}")
                out.append((Permutation(tuple(order), t, k), prob))
            return
        p = prob / len(frontier)
        for i, v in enumerate(frontier):
            new = [u for u in adj[v] if u not in seen]
            nxt = sorted(frontier[:i] + frontier[i + 1 :] + new)
            order.append(v)
            rec(nxt, seen | set(new), p)
            order.pop()

    if len(players):
        rec(list(first), set(first), 1.0)
    else:
        out.append((Permutation((), t, k), 1.0))
    return out


def order_probability(g: Graph, perm: Permutation) -> float:
    """Probability that the frontier sampler produces ``perm`` (0 if invalid)."""
    targets = np.asarray(perm.targets, dtype=np.int64)
    players = k_hop_neighborhood(g, targets, perm.hop_bound)
    adj, first = _player_adjacency(g, targets, players)
    frontier, seen, prob = set(first), set(first), 1.0
    for v in perm.order:
        if v not in frontier:
            return 0.0
        prob /= len(frontier)
        frontier.discard(v)
        for u in adj[v]:
            if u not in seen:
                seen.add(u)
                frontier.add(u)
    return prob if not frontier and len(perm.order) == len(players) else 0.0


def validate(g: Graph, p: Permutation, full: bool = True) -> bool:
    """True iff every element touches targets or earlier elements when inserted.

    With ``full`` the order must also cover the whole k-hop neighborhood exactly once.
    """
    targets = np.asarray(p.targets, dtype=np.int64)
    placed = set(targets.tolist())
    order = [int(v) for v in p.order]
    if len(set(order)) != len(order):
        return False
    if full:
        if len(targets) == 0:
            return not order
        players = k_hop_neighborhood(g, targets, p.hop_bound)
        if sorted(order) != players.tolist():
            return False
    for v in order:
        if v in placed or not any(int(u) in placed for u in g.neighbors(v)):
            return False
        placed.add(v)
    return True


def save_permutations(path, perms: list[Permutation], master_seed: int) -> None:
    payload = {
        "master_seed": int(master_seed),
        "k": perms[0].hop_bound if perms else None,
        "targets": list(perms[0].targets) if perms else [],
        "permutations": [list(p.order) for p in perms],
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_permutations(path) -> tuple[list[Permutation], int]:
    d = json.loads(Path(path).read_text())
    t = tuple(d["targets"])
    return [Permutation(tuple(o), t, d["k"]) for o in d["permutations"]], d["master_seed"]
