"""Command-line harness: ``complete``, ``reduce``, ``bench-synth`` and ``eval``.

Every subcommand reads an optional ``key = value`` config file (``--config``)
whose values are overridden by command-line flags. Exit codes: 0 success,
2 configuration error, 3 data error, 4 convergence/divergence error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data_io
from .errors import ConfigError, ConvergenceError, DataError, DivergenceError, SizeError
from .graphs import knn_graph, laplacian, load_edge_list, standardize_features
from .metrics import knn_classify, purity_protocol, rmse_masked
from .report import ExperimentReport
from .solver import FitConfig, MaskedMatrix, fit, reconstruct
from .spectral import smallest_eigenpairs
from .synth import SyntheticSpec, make_instance

log = logging.getLogger("graphfm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4

SWEEP_COLUMNS = ["axis", "value", "seed", "method", "k", "mu", "train_rmse", "val_rmse",
                 "test_rmse", "iters", "wall_seconds"]


# ---------------------------------------------------------------------------
# config parameters
# ---------------------------------------------------------------------------

def _parse_bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _float_list(s):
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    return [float(x) for x in str(s).split(",") if x.strip()]


def _int_list(s):
    if isinstance(s, (list, tuple)):
        return [int(x) for x in s]
    return [int(x) for x in str(s).split(",") if x.strip()]


def _str_list(s):
    if isinstance(s, (list, tuple)):
        return [str(x) for x in s]
    return [x.strip() for x in str(s).split(",") if x.strip()]


def _optional_float(s):
    if s is None or str(s).strip().lower() in ("", "auto", "none"):
        return None
    return float(s)


def _tri_bool(s):
    if s is None or str(s).strip().lower() == "auto":
        return "auto"
    return _parse_bool(s)


@dataclass(frozen=True)
class Param:
    name: str
    parse: object
    default: object
    help: str
    choices: tuple | None = None

    def convert(self, raw):
        try:
            value = self.parse(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.name}: {exc}") from None
        if self.choices is not None:
            items = value if isinstance(value, list) else [value]
            bad = [x for x in items if x not in self.choices]
            if bad:
                raise ConfigError(f"{self.name}: {bad[0]!r} not in {list(self.choices)}")
        return value


FIT_PARAMS = [
    Param("mu", float, 1e-5, "commutativity regularizer weight (0 gives the Ours-FM ablation)"),
    Param("learning_rate", float, 1e-3, "initial step size"),
    Param("optimizer", str, "adaptive", "descent scheme", ("adaptive", "plain_gd")),
    Param("max_iters", int, 50_000, "iteration cap"),
    Param("eval_every", int, 100, "iterations between validation checks"),
    Param("patience", int, 20, "validation checks without improvement before stopping"),
    Param("val_fraction", float, 0.05, "share of observed entries held out for validation"),
    Param("use_pq", _tri_bool, "auto", "free alignment factors P, Q (auto: on iff mu > 0)"),
    Param("lr_decay", float, 10.0, "step-size divisor on a train-objective plateau (1 = off)"),
    Param("lr_patience", int, 3, "plateaued validation windows before a step-size cut"),
    Param("seed", int, 0, "random seed"),
]

BASIS_PARAMS = [
    Param("k", int, 30, "row basis size (and column basis size unless k_c is set)"),
    Param("k_c", int, 0, "column basis size; 0 means same as k"),
]

GRAPH_PARAMS = [
    Param("knn_k", int, 10, "neighbours per node when graphs are built by KNN"),
    Param("kernel_scale", _optional_float, None, "Gaussian kernel sigma; auto = mean K-th neighbour distance"),
]

COMMANDS = {
    "complete": [
        Param("movielens", str, "", "MovieLens-100K directory (u1.base / u1.test layout)"),
        Param("split", str, "u1", "MovieLens split prefix"),
        Param("matrix", str, "", "matrix container with the values (alternative to movielens)"),
        Param("train_mask", str, "", "0/1 matrix container of observed training entries"),
        Param("test_mask", str, "", "0/1 matrix container of held-out test entries"),
        Param("row_graph", str, "", "edge-list file for the row graph (default: KNN on rows)"),
        Param("col_graph", str, "", "edge-list file for the column graph (default: KNN on columns)"),
        Param("center", _parse_bool, False, "subtract the mean observed value before fitting"),
        Param("report", str, "complete_report.txt", "report output path"),
        Param("save_reconstruction", str, "", "optional matrix container for the recovered matrix"),
        *BASIS_PARAMS, *GRAPH_PARAMS, *FIT_PARAMS,
    ],
    "reduce": [
        Param("data", str, "", "CSV of samples (rows) x features (columns)"),
        Param("labels", str, "", "one class label per line, one line per sample"),
        Param("has_header", _parse_bool, False, "skip the first CSV row"),
        Param("delimiter", str, ",", "CSV delimiter"),
        Param("n_clusters", int, 0, "k-means clusters; 0 means number of distinct labels"),
        Param("restarts", int, 10, "k-means restarts"),
        Param("classifier_k", int, 5, "neighbours of the KNN classifier"),
        Param("train_fraction", float, 0.3, "labelled share used to train the KNN classifier"),
        Param("repeats", int, 5, "random classification splits to average"),
        Param("report", str, "reduce_report.txt", "report output path"),
        Param("save_representation", str, "", "optional matrix container for the representation"),
        Param("k", int, 50, "row basis size (and column basis size unless k_c is set)"),
        Param("k_c", int, 0, "column basis size; 0 means same as k"),
        *GRAPH_PARAMS,
        *[p if p.name not in ("mu", "val_fraction") else
          Param(p.name, p.parse, 0.0, p.help) for p in FIT_PARAMS],
    ],
    "bench-synth": [
        Param("axis", str, "rank", "swept parameter", ("density", "rank", "noise")),
        Param("values", _float_list, [5, 10, 12, 15], "comma-separated sweep values "
              "(density as a fraction, noise in percent of mean edge weight)"),
        Param("seeds", _int_list, [0, 1, 2, 3, 4], "comma-separated seeds"),
        Param("methods", _str_list, ["ours", "ours_fm"], "methods to run",
              ("ours", "ours_fm")),
        Param("m", int, 150, "rows of the synthetic matrix"),
        Param("n", int, 200, "columns of the synthetic matrix"),
        Param("rank", int, 10, "rank when not swept"),
        Param("density", float, 0.1, "sampling density when not swept"),
        Param("noise", float, 0.0, "graph noise level when not swept"),
        Param("communities", int, 4, "SBM blocks on each side"),
        Param("p_in", float, 0.5, "SBM within-block edge probability"),
        Param("p_out", float, 0.01, "SBM cross-block edge probability"),
        Param("out", str, "sweep.csv", "per-run CSV output path"),
        Param("jobs", int, 1, "parallel worker processes"),
        *BASIS_PARAMS,
        *[p for p in FIT_PARAMS if p.name != "seed"],
    ],
    "eval": [
        Param("reconstruction", str, "", "matrix container with the recovered matrix"),
        Param("truth", str, "", "matrix container with the ground truth"),
        Param("mask", str, "", "0/1 matrix container selecting the test entries"),
        Param("report", str, "", "optional report output path"),
    ],
}


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    """defaults <- config file <- flags, with every value parsed and validated."""
    params = {p.name: p for p in COMMANDS[command]}
    unknown = sorted(set(file_values) - set(params))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {name: p.default for name, p in params.items()}
    for source in (file_values, flag_values):
        for key, raw in source.items():
            if raw is not None:
                cfg[key] = params[key].convert(raw)
    return cfg


def fit_config(cfg: dict, seed=None, mu=None, use_pq=None) -> FitConfig:
    mu = cfg["mu"] if mu is None else mu
    if use_pq is None:
        use_pq = cfg["use_pq"]
    if use_pq == "auto":
        use_pq = mu > 0
    try:
        return FitConfig(mu=mu, learning_rate=cfg["learning_rate"], optimizer=cfg["optimizer"],
                         max_iters=cfg["max_iters"], eval_every=cfg["eval_every"],
                         patience=cfg["patience"], val_fraction=cfg["val_fraction"],
                         use_pq=bool(use_pq), lr_decay=cfg["lr_decay"],
                         lr_patience=cfg["lr_patience"],
                         seed=cfg["seed"] if seed is None else seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _bases(g_rows, g_cols, k, k_c):
    k_c = k_c or k
    k_r = min(k, g_rows.n)
    k_c = min(k_c, g_cols.n)
    return smallest_eigenpairs(laplacian(g_rows), k_r), smallest_eigenpairs(laplacian(g_cols), k_c)


def _stamp(report, t0):
    report.meta["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    report.meta["wall_seconds"] = time.perf_counter() - t0


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _require(cfg, *keys):
    for key in keys:
        if not cfg[key]:
            raise ConfigError(f"missing required setting '{key}'")


def _load_completion_data(cfg):
    if cfg["movielens"]:
        train, test = data_io.load_movielens_100k(cfg["movielens"], cfg["split"])
        return train.masked, test.masked.mask, test.masked.values
    _require(cfg, "matrix", "train_mask", "test_mask")
    values = data_io.load_matrix(cfg["matrix"])
    train_mask = data_io.load_matrix(cfg["train_mask"])
    test_mask = data_io.load_matrix(cfg["test_mask"])
    if not (values.shape == train_mask.shape == test_mask.shape):
        raise DataError(f"shape mismatch: values {values.shape}, train mask {train_mask.shape}, "
                        f"test mask {test_mask.shape}")
    for name, mk in (("train_mask", train_mask), ("test_mask", test_mask)):
        if not np.all((mk == 0) | (mk == 1)):
            raise DataError(f"{name} must contain only 0 and 1")
    train_mask, test_mask = train_mask.astype(bool), test_mask.astype(bool)
    if np.any(train_mask & test_mask):
        raise DataError("train and test masks overlap")
    if not np.all(np.isfinite(values[train_mask | test_mask])):
        raise DataError("non-finite values on the train or test support")
    return MaskedMatrix(np.where(train_mask, values, 0.0), train_mask), test_mask, values


def cmd_complete(cfg: dict) -> int:
    t0 = time.perf_counter()
    train, test_mask, test_values = _load_completion_data(cfg)
    if train.n_observed == 0:
        raise DataError("training support is empty")
    if not test_mask.any():
        raise DataError("test support is empty")

    offset = 0.0
    if cfg["center"]:
        offset = float(train.values[train.mask].mean())
    fit_data = MaskedMatrix(np.where(train.mask, train.values - offset, 0.0), train.mask)

    if cfg["row_graph"] or cfg["col_graph"]:
        _require(cfg, "row_graph", "col_graph")
        g_rows, g_cols = load_edge_list(cfg["row_graph"]), load_edge_list(cfg["col_graph"])
        if (g_rows.n, g_cols.n) != train.shape:
            raise DataError(f"graphs have {g_rows.n} x {g_cols.n} nodes, data is {train.shape}")
    else:
        g_rows = knn_graph(fit_data.values, cfg["knn_k"], cfg["kernel_scale"])
        g_cols = knn_graph(fit_data.values.T, cfg["knn_k"], cfg["kernel_scale"])
    row_basis, col_basis = _bases(g_rows, g_cols, cfg["k"], cfg["k_c"])

    fcfg = fit_config(cfg)
    fm, report = fit(fit_data, row_basis, col_basis, fcfg)
    X = reconstruct(fm) + offset
    report.label = "ours" if fcfg.mu > 0 else "ours_fm"
    report.config.update({k: cfg[k] for k in cfg if k not in report.config})
    report.metrics["test_rmse"] = rmse_masked(X, test_values, test_mask)
    report.metrics["n_test"] = int(test_mask.sum())
    _stamp(report, t0)
    data_io.save_report(report, cfg["report"])
    if cfg["save_reconstruction"]:
        data_io.save_matrix(X, cfg["save_reconstruction"], binary=True)
    print(f"{report.label}: test_rmse={report.metrics['test_rmse']:.6g} "
          f"(train {report.metrics['train_rmse']:.6g}, val {report.metrics['val_rmse']:.6g}) "
          f"-> {cfg['report']}")
    return EXIT_OK


def _reduce_pipeline(data, labels, cfg):
    Z = standardize_features(data)
    M = Z.T  # features x samples: one column per sample
    g_rows = knn_graph(M, cfg["knn_k"], cfg["kernel_scale"])
    g_cols = knn_graph(Z, cfg["knn_k"], cfg["kernel_scale"])
    row_basis, col_basis = _bases(g_rows, g_cols, cfg["k"], cfg["k_c"])
    fm, report = fit(MaskedMatrix.full(M), row_basis, col_basis, fit_config(cfg))
    rep = reconstruct(fm).T

    n_clusters = cfg["n_clusters"] or int(np.unique(labels).size)
    ours = purity_protocol(rep, labels, n_clusters, seed=cfg["seed"], n_restarts=cfg["restarts"])
    raw = purity_protocol(Z, labels, n_clusters, seed=cfg["seed"], n_restarts=cfg["restarts"])

    rng = np.random.default_rng(cfg["seed"])
    n = labels.size
    n_train = max(cfg["classifier_k"], int(round(cfg["train_fraction"] * n)))
    if n_train >= n:
        raise ConfigError("train_fraction leaves no samples to classify")
    acc, acc_raw = [], []
    for _ in range(cfg["repeats"]):
        perm = rng.permutation(n)
        tr, te = perm[:n_train], perm[n_train:]
        acc.append(knn_classify(rep[tr], labels[tr], rep[te], cfg["classifier_k"], labels[te])[1])
        acc_raw.append(knn_classify(Z[tr], labels[tr], Z[te], cfg["classifier_k"], labels[te])[1])
    report.metrics.update({
        "purity_max": ours.max, "purity_mean": ours.mean,
        "raw_purity_max": raw.max, "raw_purity_mean": raw.mean,
        "knn_accuracy": float(np.mean(acc)), "raw_knn_accuracy": float(np.mean(acc_raw)),
        "n_clusters": n_clusters,
    })
    return rep, report


def cmd_reduce(cfg: dict) -> int:
    t0 = time.perf_counter()
    _require(cfg, "data", "labels")
    data = data_io.load_dense_csv(cfg["data"], cfg["has_header"], cfg["delimiter"])
    labels = data_io.load_labels(cfg["labels"])
    if labels.size != data.shape[0]:
        raise DataError(f"{labels.size} labels for {data.shape[0]} samples")
    rep, report = _reduce_pipeline(data, labels, cfg)
    report.label = "ours" if cfg["mu"] > 0 else "ours_fm"
    report.config.update({k: cfg[k] for k in cfg if k not in report.config})
    _stamp(report, t0)
    data_io.save_report(report, cfg["report"])
    if cfg["save_representation"]:
        data_io.save_matrix(rep, cfg["save_representation"], binary=True)
    m = report.metrics
    print(f"purity max={m['purity_max']:.4f} mean={m['purity_mean']:.4f} "
          f"(raw {m['raw_purity_max']:.4f}); knn accuracy={m['knn_accuracy']:.4f} "
          f"(raw {m['raw_knn_accuracy']:.4f}) -> {cfg['report']}")
    return EXIT_OK


_AXIS_FIELD = {"density": "density", "rank": "rank", "noise": "noise_level"}


def _synth_spec(cfg, value, seed):
    kw = dict(m=cfg["m"], n=cfg["n"], rank=cfg["rank"], density=cfg["density"],
              noise_level=cfg["noise"], communities_rows=cfg["communities"],
              communities_cols=cfg["communities"], p_in=cfg["p_in"], p_out=cfg["p_out"], seed=seed)
    field = _AXIS_FIELD[cfg["axis"]]
    kw[field] = int(value) if field == "rank" else float(value)
    try:
        return SyntheticSpec(**kw)
    except (ValueError, SizeError) as exc:
        raise ConfigError(str(exc)) from None


def run_synthetic(cfg: dict, value, seed: int, method: str) -> dict:
    """One (setting, seed, method) cell of a sweep; returns a CSV row dict."""
    inst = make_instance(_synth_spec(cfg, value, seed), k=cfg["k"], k_c=cfg["k_c"] or None)
    if method == "ours_fm":
        fcfg = fit_config(cfg, seed=seed, mu=0.0, use_pq=False)
    else:
        fcfg = fit_config(cfg, seed=seed, use_pq=True if cfg["use_pq"] == "auto" else None)
    t0 = time.perf_counter()
    fm, report = fit(inst.observed, inst.row_basis, inst.col_basis, fcfg)
    wall = time.perf_counter() - t0
    test = rmse_masked(reconstruct(fm), inst.truth, inst.test_mask)
    return {"axis": cfg["axis"], "value": value, "seed": seed, "method": method,
            "k": cfg["k"], "mu": fcfg.mu, "train_rmse": report.metrics["train_rmse"],
            "val_rmse": report.metrics["val_rmse"], "test_rmse": test,
            "iters": report.metrics["iterations"], "wall_seconds": wall}


def _run_cell(args):
    return run_synthetic(*args)


def sweep_summary(rows):
    """Mean test RMSE per (value, method), in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault((r["value"], r["method"]), []).append(r["test_rmse"])
    return [{"value": v, "method": m, "mean_test_rmse": float(np.mean(x)), "runs": len(x)}
            for (v, m), x in groups.items()]


def cmd_bench_synth(cfg: dict) -> int:
    tasks = [(cfg, v, s, meth) for v in cfg["values"] for s in cfg["seeds"] for meth in cfg["methods"]]
    for v in cfg["values"]:
        _synth_spec(cfg, v, 0)
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]
    out = Path(cfg["out"])
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    summary = sweep_summary(rows)
    summary_path = out.with_name(out.stem + ".summary.csv")
    with open(summary_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["value", "method", "mean_test_rmse", "runs"])
        w.writeheader()
        w.writerows(summary)
    print(f"{cfg['axis']:>8}  {'method':<8}  mean test RMSE")
    for s in summary:
        print(f"{s['value']:>8g}  {s['method']:<8}  {s['mean_test_rmse']:.3e}")
    print(f"-> {out}, {summary_path}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "reconstruction", "truth", "mask")
    X = data_io.load_matrix(cfg["reconstruction"])
    M = data_io.load_matrix(cfg["truth"])
    S = data_io.load_matrix(cfg["mask"])
    if not (X.shape == M.shape == S.shape):
        raise DataError(f"shape mismatch: reconstruction {X.shape}, truth {M.shape}, mask {S.shape}")
    if not np.all((S == 0) | (S == 1)):
        raise DataError("mask must contain only 0 and 1")
    if not S.any():
        raise DataError("mask selects no entries")
    value = rmse_masked(X, M, S)
    if cfg["report"]:
        rep = ExperimentReport(label="eval", config=dict(cfg),
                               metrics={"test_rmse": value, "n_test": int(S.sum())})
        data_io.save_report(rep, cfg["report"])
    print(repr(value))
    return EXIT_OK


HANDLERS = {"complete": cmd_complete, "reduce": cmd_reduce,
            "bench-synth": cmd_bench_synth, "eval": cmd_eval}


def _fmt_default(v):
    if isinstance(v, list):
        return ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
    if v is None:
        return "auto"
    if v == "":
        return "(none)"
    return str(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, params in COMMANDS.items():
        sp = sub.add_parser(name, help=HANDLERS[name].__doc__,
                            description=f"graphfm {name}. Every setting below may also be given "
                                        "in the --config file as 'key = value'.")
        sp.add_argument("--config", help="key = value config file; flags take precedence")
        for p in params:
            sp.add_argument("--" + p.name.replace("_", "-"), dest=p.name, default=None,
                            metavar=p.name.upper(),
                            help=f"{p.help} (default: {_fmt_default(p.default)})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    names = [p.name for p in COMMANDS[command]]
    flags = {n: getattr(args, n) for n in names}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(command, file_values, flags)
        return HANDLERS[command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SizeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, DivergenceError) as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
