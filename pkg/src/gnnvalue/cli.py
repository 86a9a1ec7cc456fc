"""Command-line pipeline: gen, train, learn-utility, value, drop-eval, oracle, compare.

Each subcommand reads a run configuration (JSON file plus ``--set key=value``
overrides), consumes artifacts of earlier stages from ``out_dir`` and writes its
own. CSV/JSON artifacts are byte-identical across reruns with the same seed and
any ``--workers``; wall-clock timings only go to ``run.log``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, describe_schema, load_config, stage_seed, validate
from .errors import ConfigError, DataError, GnnValueError, NumericError
from .features import FEATURE_NAMES, FeatureConfig, FeatureExtractor, compute_train_stats
from .fitters import (
    BASELINES,
    BaselineCalibration,
    BaselineUtility,
    UtilityWeights,
    build_supervision_batched,
    calibrate_baselines,
    fit_sgul_accuracy,
    fit_sgul_shapley,
)
from .graph import Graph, k_hop_neighborhood, load_graph, node_set, split_view
from .harness import expected_rows, mse_report, node_dropping, random_report
from .model import forward, load_params, save_params, train_mlp
from .perms import enumerate_with_probability, sample_permutations, save_permutations
from .plotting import plot_drop_curves
from .synth import generate, read_noise_nodes, write_synth
from .valuation import (
    AccuracyUtility,
    LinearUtility,
    ValueReport,
    decompose_check,
    exact_shapley,
    feature_shapley,
    scalar_shapley,
)

log = logging.getLogger("gnnvalue")

WEIGHT_FILES = {"sgul-shapley": "weights.json", "sgul-accuracy": "weights_accuracy.json"}


# ---------------------------------------------------------------- file helpers


def _num(x) -> str:
    return repr(float(x))


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path: Path):
    if not path.exists():
        raise DataError(f"missing artifact {path}; run the earlier stage first")
    return json.loads(path.read_text())


class Run:
    """Shared state of one command invocation."""

    def __init__(self, cfg: RunConfig, workers: int = 1, force: bool = False):
        self.cfg = cfg
        self.workers = workers
        self.force = force
        self.out = Path(cfg.out_dir)
        self._graph: Graph | None = None

    # artifacts are append-only unless --force
    def claim(self, *names) -> None:
        taken = [n for n in names if (self.out / n).exists()]
        if taken and not self.force:
            raise ConfigError(f"{self.out} already holds {taken}; use a new out_dir or --force")
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def graph(self) -> Graph:
        if self._graph is None:
            d = Path(self.cfg.data_dir)
            feats = d / "features.csv"
            if not feats.exists():
                feats = d / "features.bin"
            edges, labels, splits = d / "edges.csv", d / "labels.csv", d / "splits.json"
            for p in (feats, edges, splits):
                if not p.exists():
                    raise DataError(f"missing data file {p}")
            self._graph = load_graph(
                edges, feats, labels if labels.exists() else None, splits, transductive=self.cfg.mode == "transductive"
            )
        return self._graph

    def internal(self, external) -> np.ndarray:
        g = self.graph
        ext = np.asarray(external, dtype=np.int64)
        if g.external_ids is None:
            return node_set(ext, g.n_nodes) if ext.size else ext
        pos = np.searchsorted(g.external_ids, ext)
        pos_c = np.minimum(pos, g.n_nodes - 1)
        if np.any(g.external_ids[pos_c] != ext):
            raise DataError("unknown node id")
        return pos

    def params(self):
        path = self.out / "model.json"
        if not path.exists():
            raise DataError(f"missing {path}; run train first")
        return load_params(path)

    def feature_config(self, names=None) -> FeatureConfig:
        c = self.cfg
        return FeatureConfig(c.lp_alpha, c.lp_iters, c.entropy_sign, c.classwise_agg, tuple(names or c.features))


# ---------------------------------------------------------------- commands


def cmd_gen(run: Run) -> None:
    cfg = run.cfg
    if cfg.synth is None:
        raise ConfigError("gen needs a 'synth' section")
    scfg = cfg.synth_config
    d = Path(cfg.data_dir)
    taken = [p.name for p in d.glob("*")] if d.exists() else []
    if taken and not run.force:
        raise ConfigError(f"{d} is not empty; use a new data_dir or --force")
    g, noise = generate(scfg)
    write_synth(g, noise, d, scfg, cfg.binary_features)
    log.info("gen: %d nodes, %d edges, %d noise nodes -> %s", g.n_nodes, g.n_edges, len(noise), d)


def cmd_train(run: Run) -> None:
    cfg, g = run.cfg, run.graph
    run.claim("model.json", "train_log.json")
    history: list = []
    t0 = time.perf_counter()
    params = train_mlp(
        g,
        hidden_dims=tuple(cfg.hidden),
        epochs=cfg.epochs,
        lr=cfg.lr,
        seed=stage_seed(cfg.seed, "train"),
        conv=cfg.conv,
        k_hops=cfg.k_hops,
        batch_size=cfg.train_batch_size,
        propagate_in_training=cfg.mode == "transductive",
        history=history,
    )
    log.info("train: %d epochs in %.2fs", cfg.epochs, time.perf_counter() - t0)
    save_params(params, run.out / "model.json")
    summary = {"loss": [float(x) for x in history], "mode": cfg.mode, "conv": cfg.conv}
    for part in ("train", "val", "test"):
        nodes = g.split(part)
        nodes = nodes[g.labels[nodes] >= 0] if g.labels is not None else nodes[:0]
        if nodes.size:
            view = split_view(g, nodes)
            pred = np.argmax(forward(params, view)[view.local(nodes)], axis=1)
            summary[f"{part}_accuracy"] = float(np.mean(pred == g.labels[nodes]))
    write_json(run.out / "train_log.json", summary)


def cmd_learn_utility(run: Run) -> None:
    cfg, g = run.cfg, run.graph
    params = run.params()
    cal_files = [f"calibration_{b}.json" for b in BASELINES]
    run.claim(*WEIGHT_FILES.values(), "psi_val.csv", "phi_val.csv", "cv_report.json", "cost_report.json",
              "mse_report.json", *cal_files)
    targets = g.split("val_labeled")
    if targets.size == 0 or not g.has_label(targets):
        raise DataError("validation targets need labels")
    stats = compute_train_stats(g, params)
    t0 = time.perf_counter()
    sup = build_supervision_batched(
        g, targets, params, stats, cfg.m_val, stage_seed(cfg.seed, "learn-utility"), cfg.val_batch_size,
        run.feature_config(FEATURE_NAMES), run.workers,
    )
    t1 = time.perf_counter()
    fit_seed = stage_seed(cfg.seed, "learn-utility")
    names = tuple(cfg.features)
    ws = fit_sgul_shapley(sup, cfg.lambda_grid, cfg.folds, fit_seed, names, cfg.scale)
    t2 = time.perf_counter()
    wa = fit_sgul_accuracy(sup, cfg.lambda_grid, cfg.folds, fit_seed, names, cfg.scale)
    t3 = time.perf_counter()
    log.info("learn-utility: supervision %.2fs, fit shapley %.3fs, fit accuracy %.3fs", t1 - t0, t2 - t1, t3 - t2)
    ws.save(run.out / WEIGHT_FILES["sgul-shapley"])
    wa.save(run.out / WEIGHT_FILES["sgul-accuracy"])

    ext = g.to_external(sup.nodes)
    write_csv(run.out / "psi_val.csv", ["batch", "node_id", *FEATURE_NAMES],
              [[int(b), int(n), *map(_num, row)] for b, n, row in zip(sup.batch, ext, sup.psi)])
    write_csv(run.out / "phi_val.csv", ["batch", "node_id", "phi"],
              [[int(b), int(n), _num(p)] for b, n, p in zip(sup.batch, ext, sup.phi)])
    write_json(run.out / "cv_report.json", {"sgul-shapley": ws.cv, "sgul-accuracy": wa.cv})
    n_s = sum(expected_rows(sup.perm_lengths[i : i + cfg.m_val])[0] for i in range(0, len(sup.perm_lengths), cfg.m_val))
    write_json(run.out / "cost_report.json", {
        "rows_shapley": sup.rows_shapley,
        "rows_accuracy": sup.rows_accuracy,
        "expected_rows_shapley": n_s,
        "expected_rows_accuracy": expected_rows(sup.perm_lengths)[1],
        "permutations": len(sup.perm_lengths),
    })
    write_json(run.out / "mse_report.json", mse_report(sup, ws, wa))
    for name, cal in calibrate_baselines(g, params, targets, sup).items():
        cal.save(run.out / f"calibration_{name}.json")


def _write_values(path: Path, g: Graph, report: ValueReport) -> None:
    ext = g.to_external(report.nodes)
    if report.stderr is None:
        rows = [[int(n), _num(v)] for n, v in zip(ext, report.values)]
        write_csv(path, ["node_id", "value"], rows)
    else:
        rows = [[int(n), _num(v), _num(s)] for n, v, s in zip(ext, report.values, report.stderr)]
        write_csv(path, ["node_id", "value", "stderr"], rows)
    write_json(path.with_suffix(".json"), report.meta)


def read_values(run: Run, method: str) -> ValueReport:
    path = run.out / f"values_{method}.csv"
    if not path.exists():
        raise DataError(f"missing {path}; run value first")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    nodes = run.internal([int(r["node_id"]) for r in rows])
    vals = np.array([float(r["value"]) for r in rows])
    order = np.argsort(nodes)
    meta = read_json(path.with_suffix(".json"))
    return ValueReport(np.asarray(nodes, dtype=np.int64)[order], vals[order], meta)


def _test_targets(g: Graph) -> np.ndarray:
    targets = g.split("test_target")
    if targets.size == 0:
        raise DataError("no test targets in splits")
    return targets


def cmd_value(run: Run) -> None:
    cfg, g = run.cfg, run.graph
    params = run.params()
    methods = list(cfg.methods)
    files = [f"values_{m}.{ext}" for m in methods for ext in ("csv", "json")]
    run.claim(*files, "values.csv", "values.json", "psi_test.csv", "perms_test.json")
    targets = _test_targets(g)
    seed = stage_seed(cfg.seed, "value")
    hood = k_hop_neighborhood(g, targets, params.k_hops)
    empty = hood.size == 0
    if empty:
        log.warning("value: test targets have no neighbors; writing empty value files")
        perms = []
    else:
        perms = sample_permutations(g, targets, params.k_hops, cfg.m_test, seed)
    save_permutations(run.out / "perms_test.json", perms, seed)
    stats = compute_train_stats(g, params)
    extractor = FeatureExtractor.for_targets(g, params, stats, targets, run.feature_config(FEATURE_NAMES))

    psi = None
    if not empty and any(m.startswith("sgul") for m in methods):
        t0 = time.perf_counter()
        psi = feature_shapley(g, targets, perms, extractor, run.workers)
        log.info("value: feature Shapley over %d permutations in %.2fs", len(perms), time.perf_counter() - t0)
        write_csv(run.out / "psi_test.csv", ["node_id", *FEATURE_NAMES],
                  [[int(n), *map(_num, row)] for n, row in zip(g.to_external(psi.nodes), psi.psi)])

    reports = {}
    for m in methods:
        meta = {"method": m, "M": len(perms), "seed": seed, "targets": g.to_external(targets).tolist()}
        if empty:
            reports[m] = ValueReport(hood, np.zeros(0), meta)
        elif m in WEIGHT_FILES:
            w = UtilityWeights.load(run.out / WEIGHT_FILES[m]) if (run.out / WEIGHT_FILES[m]).exists() else None
            if w is None:
                raise DataError(f"missing {WEIGHT_FILES[m]}; run learn-utility first")
            cols = [FEATURE_NAMES.index(n) for n in w.feature_names]
            meta.update({"utility": "linear", "perm_digest": psi.perm_digest})
            reports[m] = ValueReport(psi.nodes, psi.psi[:, cols] @ w.w, meta)
        elif m == "random":
            r = random_report(hood, stage_seed(cfg.seed, "random"))
            r.meta.update({k: v for k, v in meta.items() if k not in r.meta})
            reports[m] = r
        else:
            path = run.out / f"calibration_{m}.json"
            if not path.exists():
                raise DataError(f"missing {path.name}; run learn-utility first")
            util = BaselineUtility(BaselineCalibration.load(path), params, targets, extractor.fixed)
            reports[m] = scalar_shapley(g, targets, perms, util, run.workers, meta)
        _write_values(run.out / f"values_{m}.csv", g, reports[m])
    if cfg.method in reports:
        _write_values(run.out / "values.csv", g, reports[cfg.method])


def _write_curves(out: Path, stem: str, curves: dict, sd: dict | None = None, dat_name: str | None = None,
                  xs=None) -> None:
    """Per-method CSVs ``<stem>_<method>.csv``, one gnuplot-style flat file and the figure.

    ``xs`` replaces the removal count k with another abscissa (fraction removed).
    """
    methods = sorted(curves)
    xname = "k" if xs is None else "fraction_removed"
    xcol = (lambda k: k) if xs is None else (lambda k: _num(xs[k]))
    for m in methods:
        header = [xname, "acc"] if sd is None else [xname, "acc_mean", "acc_sd"]
        rows = [[xcol(k), _num(a)] + ([] if sd is None else [_num(sd[m][k])]) for k, a in enumerate(curves[m])]
        write_csv(out / f"{stem}_{m}.csv", header, rows)
    cols = methods if sd is None else [f"{m}_{x}" for m in methods for x in ("mean", "sd")]
    lines = [f"# {xname} " + " ".join(cols)]
    for k in range(max(len(c) for c in curves.values())):
        vals = []
        for m in methods:
            inside = k < len(curves[m])
            vals.append(_num(curves[m][k]) if inside else "nan")
            if sd is not None:
                vals.append(_num(sd[m][k]) if inside else "nan")
        lines.append(f"{xcol(k)} " + " ".join(vals))
    name = dat_name or stem
    (out / f"{name}.dat").write_text("\n".join(lines) + "\n")
    plot_drop_curves(curves, out / f"{name}.png", sd, xs=xs)


def cmd_drop_eval(run: Run) -> None:
    cfg, g = run.cfg, run.graph
    params = run.params()
    methods = list(cfg.methods)
    run.claim("auc_summary.json", "drop_curves.dat", "drop_curves.png", *[f"curves_{m}.csv" for m in methods])
    targets = _test_targets(g)
    if not g.has_label(targets):
        raise DataError("drop-eval needs test target labels (evaluation only)")
    curves, summary = {}, {}
    for m in methods:
        report = read_values(run, m)
        if report.nodes.size == 0:
            log.warning("drop-eval: %s has no neighbors to remove", m)
            continue
        c = node_dropping(g, targets, report, params)
        curves[m] = c.acc
        summary[m] = c.auc
    if not curves:
        write_json(run.out / "auc_summary.json", {})
        return
    write_json(run.out / "auc_summary.json", summary)
    _write_curves(run.out, "curves", curves, dat_name="drop_curves")


def cmd_oracle(run: Run) -> None:
    cfg, g = run.cfg, run.graph
    params = run.params()
    run.claim("oracle_report.json")
    targets = run.internal(cfg.oracle_targets) if cfg.oracle_targets else _test_targets(g)
    targets = node_set(targets, g.n_nodes)
    utility = AccuracyUtility.from_graph(g, params, targets)
    weighted = enumerate_with_probability(g, targets, params.k_hops)
    if not weighted[0][0].order:
        raise DataError("targets have no neighbors")
    exact = exact_shapley(g, targets, weighted, utility)
    uniform = exact_shapley(g, targets, [(p, 1.0) for p, _ in weighted], utility)
    seed = stage_seed(cfg.seed, "oracle")
    perms = sample_permutations(g, targets, params.k_hops, cfg.m_oracle, seed)
    sampled = scalar_shapley(g, targets, perms, utility, run.workers)
    se = sampled.stderr
    within = np.abs(sampled.values - exact) <= 3 * se + 1e-12

    wpath = run.out / WEIGHT_FILES["sgul-shapley"]
    w = UtilityWeights.load(wpath) if wpath.exists() else None
    stats = compute_train_stats(g, params)
    names = w.feature_names if w is not None else FEATURE_NAMES
    wv = w.w if w is not None else np.ones(len(names))
    extractor = FeatureExtractor.for_targets(g, params, stats, targets, run.feature_config(names))
    psi = feature_shapley(g, targets, perms, extractor, run.workers)
    phis = scalar_shapley(g, targets, perms, LinearUtility(extractor, wv), run.workers)
    write_json(run.out / "oracle_report.json", {
        "targets": g.to_external(targets).tolist(),
        "nodes": g.to_external(sampled.nodes).tolist(),
        "n_orders": len(weighted),
        "exact": exact.tolist(),
        "exact_uniform_orders": uniform.tolist(),
        "sampled": sampled.values.tolist(),
        "stderr": se.tolist(),
        "within_3se": int(within.sum()),
        "M": cfg.m_oracle,
        "seed": seed,
        "decompose_check": decompose_check(wv, psi, phis),
        "decompose_weights": "weights.json" if w is not None else "ones",
    })


def _align(curves: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack curves of equal length, or resample onto a shared fraction-removed grid."""
    lengths = {len(c) for c in curves}
    if len(lengths) == 1:
        return np.arange(lengths.pop()), np.stack(curves)
    grid = np.linspace(0.0, 1.0, 21)
    return grid, np.stack([np.interp(grid, np.linspace(0.0, 1.0, len(c)), c) for c in curves])


def cmd_compare(run: Run) -> None:
    """Full pipeline over ``n_seeds`` consecutive master seeds, then mean +/- sd aggregation."""
    cfg = run.cfg
    run.claim("compare_summary.json", "compare_curves.dat", "compare_curves.png")
    per_seed = []
    for i in range(cfg.n_seeds):
        seed = cfg.seed + i
        sub_dir = run.out / f"seed_{seed}"
        values = {**cfg.to_dict(), "seed": seed, "out_dir": str(sub_dir)}
        if cfg.synth is not None:
            values["data_dir"] = str(sub_dir / "data")
        sub = Run(validate(values), run.workers, run.force)
        stages = ([cmd_gen] if cfg.synth is not None else []) + [cmd_train, cmd_learn_utility, cmd_value, cmd_drop_eval]
        for stage in stages:
            stage(sub)
        per_seed.append(sub)
        log.info("compare: seed %d done", seed)

    methods = list(cfg.methods)
    curves, sd, summary, grid = {}, {}, {}, None
    for m in methods:
        runs = [r for r in per_seed if (r.out / f"curves_{m}.csv").exists()]
        if not runs:
            continue
        accs = []
        for r in runs:
            with open(r.out / f"curves_{m}.csv", newline="") as fh:
                accs.append(np.array([float(row["acc"]) for row in csv.DictReader(fh)]))
        aucs = [float(a[1:].mean()) for a in accs]
        xs, stacked = _align(accs)
        grid = None if xs.dtype.kind == "i" else xs
        curves[m] = stacked.mean(axis=0)
        sd[m] = stacked.std(axis=0)
        summary[m] = {"auc_mean": float(np.mean(aucs)), "auc_sd": float(np.std(aucs)), "auc": aucs}
    if "random" in summary:
        for m in summary:
            if m != "random":
                summary[m]["seeds_below_random"] = int(np.sum(np.array(summary[m]["auc"]) < np.array(summary["random"]["auc"])))
    noise = []
    for r in per_seed:
        path = Path(r.cfg.data_dir) / "noise_nodes.json"
        vpath = r.out / f"values_{cfg.method}.csv"
        if path.exists() and vpath.exists():
            rep = read_values(r, cfg.method)
            flag = np.isin(rep.nodes, r.internal(read_noise_nodes(path)))
            if flag.any() and (~flag).any():
                noise.append({"seed": r.cfg.seed, "noise_mean": float(rep.values[flag].mean()),
                              "clean_mean": float(rep.values[~flag].mean())})
    write_json(run.out / "compare_summary.json", {"seeds": cfg.n_seeds, "methods": summary, "noise_vs_clean": noise})
    if curves:
        _write_curves(run.out, "compare_curves", curves, sd, xs=grid)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "learn-utility": cmd_learn_utility,
    "value": cmd_value,
    "drop-eval": cmd_drop_eval,
    "oracle": cmd_oracle,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gnnvalue",
        description="Structure-aware Shapley valuation of test-time graph neighbors.",
        epilog="config keys:\n" + describe_schema(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("-c", "--config", help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for permutation tracing")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _setup_logging(out_dir: Path | None, verbose: bool) -> list[logging.Handler]:
    log.setLevel(logging.INFO)
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    handlers[0].setLevel(logging.INFO if verbose else logging.WARNING)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out_dir / "run.log")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        handlers.append(fh)
    for h in handlers:
        log.addHandler(h)
    return handlers


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return ConfigError.exit_code
    handlers: list[logging.Handler] = []
    try:
        cfg = load_config(args.config, args.set)
        handlers = _setup_logging(Path(cfg.out_dir), args.verbose)
        log.info("%s: config %s", args.command, json.dumps(cfg.to_dict(), sort_keys=True))
        COMMANDS[args.command](Run(cfg, args.workers, args.force))
        return 0
    except GnnValueError as e:
        if handlers:
            log.error("error: %s", e)
        else:
            print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return NumericError.exit_code
    finally:
        for h in handlers:
            log.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
