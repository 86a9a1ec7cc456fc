"""Planted stochastic-block-model graphs for desk-scale experiments.

Clean nodes get Gaussian features around their class mean and SBM edges.
A fraction of validation and test nodes are *noise neighbors*: their features
come from a wrong class and their edges are wired uniformly at random, so they
are expected to hurt the targets they touch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import Graph, write_graph


@dataclass(frozen=True)
class SynthConfig:
    n_per_split: int = 120
    n_classes: int = 3
    dim: int = 16
    p_in: float = 0.3
    p_out: float = 0.02
    sigma: float = 0.5
    noise_frac: float = 0.1
    seed: int = 0
    n_val_targets: int = 30
    n_test_targets: int = 10
    train_labeled_frac: float = 1.0
    transductive: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise ConfigError("need 0 <= p_out <= p_in <= 1")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if not 0.0 <= self.noise_frac < 1.0:
            raise ConfigError("noise_frac must lie in [0, 1)")
        if self.n_classes < 1 or self.dim < self.n_classes:
            raise ConfigError("need 1 <= n_classes <= dim")
        if not 0.0 < self.train_labeled_frac <= 1.0:
            raise ConfigError("train_labeled_frac must lie in (0, 1]")
        if self.n_per_split < self.n_classes:
            raise ConfigError("n_per_split must be at least n_classes")
        n_clean = self.n_per_split - int(round(self.noise_frac * self.n_per_split))
        if max(self.n_val_targets, self.n_test_targets) > n_clean or min(self.n_val_targets, self.n_test_targets) < 1:
            raise ConfigError("target counts must lie in [1, clean nodes per split]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth keys {sorted(unknown)}")
        return cls(**d)


def class_means(n_classes: int, dim: int) -> np.ndarray:
    """Scaled basis vectors: every pair of means is exactly distance 1 apart."""
    return np.eye(n_classes, dim) / np.sqrt(2.0)


def _block_edges(rng, nodes, labels, noisy, p_in, p_out, p_noise) -> np.ndarray:
    """Sample u < v edges among ``nodes``; pairs touching a noise node use ``p_noise``."""
    n = len(nodes)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    prob = np.where(noisy[iu] | noisy[ju], p_noise, prob)
    keep = rng.random(len(iu)) < prob
    return np.stack([nodes[iu[keep]], nodes[ju[keep]]], axis=1)


def generate(cfg: SynthConfig) -> tuple[Graph, np.ndarray]:
    """Build the planted graph; returns it together with the sorted noise-node ids.

    Node ids are laid out train, val, test in blocks of ``n_per_split``. In
    inductive mode edges only appear within a split; in transductive mode the
    SBM is drawn over the whole node set.
    """
    rng = np.random.default_rng(cfg.seed)
    n, C = cfg.n_per_split, cfg.n_classes
    total = 3 * n
    labels = rng.integers(C, size=total)
    # every class present among the labeled training nodes
    labels[:C] = np.arange(C)

    noisy = np.zeros(total, dtype=bool)
    n_noise = int(round(cfg.noise_frac * n))
    splits: dict[str, np.ndarray] = {}
    for s, name in enumerate(("train", "val", "test")):
        ids = np.arange(s * n, (s + 1) * n)
        splits[name] = ids
        if name == "train" or n_noise == 0:
            continue
        noisy[rng.choice(ids, n_noise, replace=False)] = True

    # features: clean nodes around their class mean, noise nodes around a wrong one
    feat_class = labels.copy()
    if C > 1 and noisy.any():
        shift = rng.integers(1, C, size=int(noisy.sum()))
        feat_class[noisy] = (labels[noisy] + shift) % C
    means = class_means(C, cfg.dim)
    features = means[feat_class] + cfg.sigma * rng.standard_normal((total, cfg.dim))

    # random wiring at the mean SBM edge density, so noise degrees match clean ones
    p_noise = cfg.p_in / C + cfg.p_out * (C - 1) / C
    if cfg.transductive:
        edges = _block_edges(rng, np.arange(total), labels, noisy, cfg.p_in, cfg.p_out, p_noise)
    else:
        edges = np.concatenate(
            [_block_edges(rng, ids, labels[ids], noisy[ids], cfg.p_in, cfg.p_out, p_noise) for ids in splits.values()]
        )

    train = splits["train"]
    n_lab = max(C, int(round(cfg.train_labeled_frac * n)))
    extra = rng.permutation(train[C:])[: n_lab - C]
    splits["train_labeled"] = np.concatenate([train[:C], extra])
    for name, parent, count in (("val_labeled", "val", cfg.n_val_targets), ("test_target", "test", cfg.n_test_targets)):
        clean = splits[parent][~noisy[splits[parent]]]
        splits[name] = np.sort(rng.choice(clean, count, replace=False))
    g = Graph.from_edges(total, edges, features, labels, splits, transductive=cfg.transductive)
    return g, np.flatnonzero(noisy)


def write_synth(g: Graph, noise_nodes, directory, cfg: SynthConfig | None = None, binary_features: bool = False) -> dict:
    """Standard graph files plus ``noise_nodes.json`` (and the config used, when given)."""
    paths = write_graph(g, directory, binary_features)
    d = Path(directory)
    paths["noise_nodes"] = d / "noise_nodes.json"
    ext = g.to_external(np.asarray(noise_nodes, dtype=np.int64))
    paths["noise_nodes"].write_text(json.dumps({"noise_nodes": ext.tolist()}) + "\n")
    if cfg is not None:
        paths["synth_config"] = d / "synth_config.json"
        paths["synth_config"].write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n")
    return paths


def read_noise_nodes(path) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text())["noise_nodes"], dtype=np.int64)
