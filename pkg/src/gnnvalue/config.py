"""Run configuration: a flat, schema-checked key/value mapping.

Every key has a type, a default and (where it matters) a validator. Unknown keys
are rejected before any work starts. ``synth`` holds generator settings and is
checked against :class:`gnnvalue.synth.SynthConfig`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError
from .features import FEATURE_NAMES
from .fitters import BASELINES, DEFAULT_LAMBDA_GRID
from .synth import SynthConfig

VALUE_METHODS = ("sgul-shapley", "sgul-accuracy") + BASELINES + ("random",)

# stage ids for seed derivation; never renumber, only append
STAGES = {"gen": 0, "train": 1, "learn-utility": 2, "value": 3, "random": 4, "oracle": 5, "compare": 6}


def _positive_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 1


def _nonneg_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _one_of(*options):
    return lambda v: v in options


def _subset_of(options):
    return lambda v: isinstance(v, list) and len(v) > 0 and len(set(v)) == len(v) and all(x in options for x in v)


SCHEMA: dict[str, tuple[Any, Any, str]] = {
    # key: (default, validator, help)
    "data_dir": ("data", lambda v: isinstance(v, str) and v != "", "graph file directory"),
    "out_dir": ("run", lambda v: isinstance(v, str) and v != "", "artifact directory"),
    "mode": ("inductive", _one_of("inductive", "transductive"), "split-graph semantics"),
    "conv": ("sgc", _one_of("sgc", "gcn"), "inference-time message passing"),
    "k_hops": (2, _positive_int, "propagation depth and neighborhood radius"),
    "hidden": ([32], lambda v: isinstance(v, list) and all(_positive_int(h) for h in v), "hidden layer widths"),
    "epochs": (100, _nonneg_int, "training epochs"),
    "lr": (0.1, lambda v: _number(v) and v > 0, "learning rate"),
    "train_batch_size": (32, _positive_int, "mini-batch size for MLP training"),
    "m_val": (50, _positive_int, "permutations per validation target batch"),
    "m_test": (5, _positive_int, "permutations for test-time valuation"),
    "val_batch_size": (10, _nonneg_int, "validation targets per joint game (0 = all)"),
    "lambda_grid": (
        list(DEFAULT_LAMBDA_GRID),
        lambda v: isinstance(v, list) and len(v) > 0 and all(_number(x) and x >= 0 for x in v),
        "L1 penalties searched by cross-validation",
    ),
    "folds": (5, lambda v: _positive_int(v) and v >= 2, "cross-validation folds"),
    "scale": (True, lambda v: isinstance(v, bool), "max-abs column scaling before fitting"),
    "features": (list(FEATURE_NAMES), _subset_of(FEATURE_NAMES), "feature subset"),
    "entropy_sign": ("prose", _one_of("prose", "literal"), "sign convention of the entropy feature"),
    "classwise_agg": ("min", _one_of("min", "max"), "aggregation over class prototypes"),
    "lp_alpha": (0.9, lambda v: _number(v) and 0 <= v <= 1, "label propagation mixing"),
    "lp_iters": (10, _nonneg_int, "label propagation iterations"),
    "method": ("sgul-shapley", _one_of("sgul-shapley", "sgul-accuracy"), "learned utility used by value"),
    "methods": (list(VALUE_METHODS), _subset_of(VALUE_METHODS), "methods valued and evaluated"),
    "seed": (0, _nonneg_int, "master seed"),
    "n_seeds": (10, _positive_int, "seeds aggregated by compare"),
    "m_oracle": (2000, _positive_int, "Monte Carlo permutations in the oracle report"),
    "oracle_targets": (None, lambda v: v is None or (isinstance(v, list) and all(_nonneg_int(x) for x in v)), "external ids"),
    "binary_features": (False, lambda v: isinstance(v, bool), "write features.bin instead of csv"),
    "synth": (None, lambda v: v is None or isinstance(v, dict), "synthetic generator settings"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def to_dict(self) -> dict:
        return dict(self.values)

    @property
    def synth_config(self) -> SynthConfig:
        d = dict(self.values["synth"] or {})
        d.setdefault("seed", stage_seed(self.seed, "gen"))
        d.setdefault("transductive", self.mode == "transductive")
        return SynthConfig.from_dict(d)

    def with_seed(self, seed: int) -> "RunConfig":
        return validate({**self.values, "seed": int(seed)})


def validate(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    values = {}
    for key, (default, check, _) in SCHEMA.items():
        v = raw.get(key, default)
        if isinstance(v, float) and float(v).is_integer() and isinstance(default, int) and not isinstance(default, bool):
            v = int(v)
        if not check(v):
            raise ConfigError(f"invalid value for {key!r}: {v!r}")
        values[key] = v
    if values["synth"] is not None:
        try:
            SynthConfig.from_dict({**values["synth"], "seed": values["synth"].get("seed", 0)})
        except TypeError as e:
            raise ConfigError(f"invalid synth settings: {e}") from None
    return RunConfig(values)


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override must look like key=value: {item!r}")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key.strip(), value


def load_config(path=None, overrides=()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in overrides:
        key, value = parse_override(item)
        if "." in key:
            outer, inner = key.split(".", 1)
            sub = dict(raw.get(outer) or {})
            sub[inner] = value
            raw[outer] = sub
        else:
            raw[key] = value
    return validate(raw)


def stage_seed(master: int, stage: str) -> int:
    """Seed of one pipeline stage: first word of SeedSequence([master, stage id])."""
    return int(np.random.SeedSequence([int(master), STAGES[stage]]).generate_state(1)[0])


def describe_schema() -> str:
    lines = []
    for key, (default, _, text) in SCHEMA.items():
        lines.append(f"  {key:<18} {text} (default {json.dumps(default)})")
    return "\n".join(lines)
