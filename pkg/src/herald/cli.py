"""Command-line entry point: ``herald {train,cv,gradcheck,inspect}``.

Configuration precedence: built-in defaults < ``--config`` JSON file < flags.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence,
5 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
from sklearn.model_selection import train_test_split

from . import __version__
from . import tensor as T
from .data_io import DataError, GraphSample, NodeDataset, file_checksum, load_hypergraph_json, load_node_dataset, \
    load_tu_dataset, tu_to_samples
from .gradcheck import SUITES, THRESHOLD, run_suites
from .herald import MixSchedule
from .hypergraph import StructuralError
from .model import HGNN, ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .training import DivergenceError, GraphSplit, TrainConfig, aggregate, cross_validate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 2, 3, 4, 5

logger = logging.getLogger("herald")

DEFAULTS = {
    "task": "node",
    "herald": "on",
    "fast_herald": False,
    "layers": None,
    "hidden": 64,
    "herald_hidden": 32,
    "sigma": 1.0,
    "mix": "cosine",
    "lr": 0.01,
    "epochs": 1000,
    "patience": 100,
    "reg_weight": 0.1,
    "dropout": 0.0,
    "batch_size": 32,
    "seeds": [0],
    "folds": 10,
    "out_dir": "runs",
}


def parse_seeds(text: str) -> list[int]:
    """``"0..9"`` (inclusive range) or ``"0,3,7"``."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--data", help="hypergraph JSON (node task) or TU dataset directory (graph task)")
    p.add_argument("--task", choices=["node", "graph"])
    p.add_argument("--model", choices=["hgnn"], default="hgnn")
    p.add_argument("--herald", choices=["on", "off"])
    p.add_argument("--fast-herald", dest="fast_herald", action="store_const", const=True)
    p.add_argument("--layers", type=int, help="number of HGNN layers (default 3 node / 2 graph)")
    p.add_argument("--hidden", type=int)
    p.add_argument("--herald-hidden", dest="herald_hidden", type=int)
    p.add_argument("--sigma", type=float, help="Gaussian kernel bandwidth")
    p.add_argument("--mix", help="'cosine' or 'const:<a>'")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--reg-weight", dest="reg_weight", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=parse_seeds)
    p.add_argument("--folds", type=int)
    p.add_argument("--out-dir", dest="out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="herald", description="HGNN with learnable hypergraph Laplacian adaptors")
    parser.add_argument("--version", action="version", version=f"herald {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on one dataset for one or more seeds")
    _add_model_flags(p_train)
    p_cv = sub.add_parser("cv", help="k-fold cross-validation on a TU graph dataset")
    _add_model_flags(p_cv)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--op", choices=["all", *SUITES], default="all")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--repeats", type=int, default=3)
    p_grad.add_argument("--inject-fault", dest="inject_fault", help=argparse.SUPPRESS)

    p_ins = sub.add_parser("inspect", help="dump the learned operators of a checkpoint")
    p_ins.add_argument("--checkpoint", required=True)
    p_ins.add_argument("--data", required=True)
    p_ins.add_argument("--graph-index", dest="graph_index", type=int, default=0)
    p_ins.add_argument("--out-dir", dest="out_dir", default="inspect")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(DEFAULTS) - {"data", "seed"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "seed" in file_cfg:
            file_cfg["seeds"] = [file_cfg.pop("seed")]
        cfg.update(file_cfg)
    for key in [*DEFAULTS, "data"]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "seed", None) is not None:
        cfg["seeds"] = [args.seed]
    if isinstance(cfg["seeds"], str):
        cfg["seeds"] = parse_seeds(cfg["seeds"])
    if not cfg.get("data"):
        raise ConfigError("--data is required")
    if cfg["layers"] is None:
        cfg["layers"] = 3 if cfg["task"] == "node" else 2
    try:
        MixSchedule.parse(cfg["mix"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["task"] not in ("node", "graph"):
        raise ConfigError(f"unknown task {cfg['task']!r}")
    return cfg


def build_model_config(cfg: dict, in_dim: int, num_classes: int) -> ModelConfig:
    common = dict(
        hidden=cfg["hidden"],
        num_layers=cfg["layers"],
        herald=cfg["herald"] == "on" or bool(cfg["fast_herald"]),
        dropout=cfg["dropout"],
        herald_hidden=cfg["herald_hidden"],
        sigma=cfg["sigma"],
        mix=MixSchedule.parse(cfg["mix"]),
        fast_herald=bool(cfg["fast_herald"]),
    )
    if cfg["layers"] < 1:
        raise ConfigError("--layers must be >= 1")
    if cfg["task"] == "node":
        return ModelConfig.node_default(in_dim, num_classes, **common)
    return ModelConfig.graph_default(in_dim, num_classes, **common)


def build_train_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(lr=cfg["lr"], max_epochs=cfg["epochs"], patience=cfg["patience"],
                       reg_weight=cfg["reg_weight"], seed=seed, batch_size=cfg["batch_size"])


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"herald-{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"herald-{__version__}"


def make_manifest(cfg: dict, seed: int) -> dict:
    return {
        "config": {k: v for k, v in cfg.items() if k != "seeds"},
        "data": {"path": str(cfg["data"]), "sha256": file_checksum(cfg["data"])},
        "seed": seed,
        "build_id": build_id(),
    }


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_metrics(path: Path, report, manifest: dict) -> None:
    # Timings are excluded so reruns reproduce the file byte for byte.
    header = "# manifest: " + json.dumps(manifest, sort_keys=True, default=_json_default) + "\n"
    path.write_text(header + report.metrics_csv(), encoding="utf-8")


def _graph_split(samples: list[GraphSample], seed: int) -> GraphSplit:
    """Seeded 80/10/10 train/val/test split, stratified wherever every class can be split."""
    idx = np.arange(len(samples))
    labels = np.array([s.label for s in samples])
    if len(samples) < 3:
        raise DataError("structure", "graph training needs at least 3 graphs; use cv for tiny datasets")

    def strat(ids):
        _, counts = np.unique(labels[ids], return_counts=True)
        return labels[ids] if counts.min() >= 2 and len(counts) > 1 else None

    n_rest = max(2, int(round(0.2 * len(idx))))
    try:
        tr, rest = train_test_split(idx, test_size=n_rest, random_state=seed, stratify=strat(idx))
    except ValueError:
        tr, rest = train_test_split(idx, test_size=n_rest, random_state=seed)
    try:
        va, te = train_test_split(rest, test_size=0.5, random_state=seed, stratify=strat(rest))
    except ValueError:
        va, te = train_test_split(rest, test_size=0.5, random_state=seed)
    pick = lambda ids: [samples[i] for i in sorted(ids)]  # noqa: E731
    return GraphSplit(pick(tr), pick(va), pick(te))


def _load_graph_samples(path) -> list[GraphSample]:
    samples = tu_to_samples(load_tu_dataset(path))
    if not samples:
        raise DataError("empty", f"{path} holds no graphs")
    return samples


def describe_node_dataset(data) -> str:
    g = data.graph
    singletons = sum(len(e) == 1 for e in g.hyperedges)
    return (f"{g.num_nodes} nodes, {g.num_edges} hyperedges ({singletons} singleton), "
            f"{data.num_features} features, {data.num_classes} classes")


def describe_graphs(samples) -> str:
    sizes = [s.graph.num_nodes for s in samples]
    return (f"{len(samples)} graphs, {len({s.label for s in samples})} classes, "
            f"avg {np.mean(sizes):.1f} nodes, {samples[0].graph.feature_dim} features")


def cmd_train(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    reports = []
    for i, seed in enumerate(cfg["seeds"]):
        t0 = time.perf_counter()
        if cfg["task"] == "node":
            data = load_node_dataset(cfg["data"], seed=seed)
            if i == 0:
                print(f"dataset: {describe_node_dataset(data)}")
            model_cfg = build_model_config(cfg, data.num_features, data.num_classes)
        else:
            samples = _load_graph_samples(cfg["data"])
            if i == 0:
                print(f"dataset: {describe_graphs(samples)}")
            data = _graph_split(samples, seed)
            model_cfg = build_model_config(cfg, samples[0].graph.feature_dim, len({s.label for s in samples}))
        model = HGNN(model_cfg, seed=seed)
        t_load = time.perf_counter()
        report = train(model, data, build_train_config(cfg, seed))
        t_train = time.perf_counter()

        manifest = make_manifest(cfg, seed)
        manifest["parameter_count"] = model.num_parameters()
        manifest["herald_parameter_count"] = model.herald_parameter_count()
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_metrics(out_dir / f"metrics_seed{seed}.csv", report, manifest)
        save_checkpoint(out_dir / f"checkpoint_seed{seed}.json", model, report.best_val_epoch, manifest)
        timed = dict(manifest, timings={"load_s": t_load - t0, "train_s": t_train - t_load})
        _write_json(out_dir / f"report_seed{seed}.json", {"manifest": timed, "report": report.to_dict()})
        reports.append(report)
        print(f"seed {seed}: test accuracy {report.test_accuracy:.4f} "
              f"(best val epoch {report.best_val_epoch}, stopped {report.stopped_epoch})")

    agg = aggregate(reports)
    summary = {
        "manifest": make_manifest(cfg, cfg["seeds"][0]) | {"seeds": cfg["seeds"]},
        "test_accuracies": agg.fold_accuracies,
        "mean_accuracy": agg.mean_accuracy,
        "std_accuracy": agg.std_accuracy,
    }
    _write_json(out_dir / "aggregate.json", summary)
    print(f"mean test accuracy over {len(reports)} run(s): {100 * agg.mean_accuracy:.2f} +- {100 * agg.std_accuracy:.2f}")
    return EXIT_OK


def cmd_cv(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    seed = cfg["seeds"][0]
    cfg = dict(cfg, task="graph")
    samples = _load_graph_samples(cfg["data"])
    print(f"dataset: {describe_graphs(samples)}")
    model_cfg = build_model_config(cfg, samples[0].graph.feature_dim, len({s.label for s in samples}))
    t0 = time.perf_counter()
    report = cross_validate(samples, model_cfg, build_train_config(cfg, seed), folds=cfg["folds"])
    manifest = make_manifest(cfg, seed)
    manifest["parameter_count"] = HGNN(model_cfg, seed).num_parameters()
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, fold in enumerate(report.folds, start=1):
        _write_metrics(out_dir / f"metrics_fold{k}.csv", fold, manifest)
        print(f"fold {k}: test accuracy {fold.test_accuracy:.4f}")
    timed = dict(manifest, timings={"total_s": time.perf_counter() - t0})
    _write_json(out_dir / "cv_report.json", {"manifest": timed, "report": report.to_dict()})
    print(f"{cfg['folds']}-fold accuracy: {100 * report.mean_accuracy:.2f} +- {100 * report.std_accuracy:.2f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    names = list(SUITES) if args.op == "all" else [args.op]
    T.inject_fault(None)
    if args.inject_fault:
        T.inject_fault(args.inject_fault)
    try:
        results = run_suites(names, seed=args.seed, repeats=args.repeats)
    finally:
        T.inject_fault(None)
    failed = []
    for name, groups in results.items():
        for group, err in groups.items():
            ok = err < THRESHOLD
            print(f"{name:24s} {group:16s} max rel err {err:.3e}  {'PASS' if ok else 'FAIL'}")
            if not ok:
                failed.append(f"{name}:{group}")
    if failed:
        print(f"gradient check FAILED for {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    print("gradient check PASSED")
    return EXIT_OK


def _eigen_summary(M: np.ndarray) -> dict:
    eig = np.linalg.eigvalsh(0.5 * (M + M.T))
    return {"min": float(eig[0]), "max": float(eig[-1]), "asymmetry": float(np.abs(M - M.T).max())}


def cmd_inspect(args: argparse.Namespace) -> int:
    model, doc = load_checkpoint(args.checkpoint)
    if model.config.task == "node_classification":
        g, _ = load_hypergraph_json(args.data)
    else:
        samples = _load_graph_samples(args.data)
        if not 0 <= args.graph_index < len(samples):
            raise ConfigError(f"--graph-index {args.graph_index} out of range (0..{len(samples) - 1})")
        g = samples[args.graph_index].graph
    if g.features is None or g.feature_dim != model.config.layers[0].in_dim:
        raise ConfigError(
            f"checkpoint expects {model.config.layers[0].in_dim} input features, data has "
            f"{None if g.features is None else g.feature_dim}"
        )
    out = model.forward(g)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    N = g.operator
    np.savetxt(out_dir / "N.csv", N, delimiter=",", fmt="%.17g")
    summary = {"manifest": doc.get("manifest"), "checkpoint": str(args.checkpoint), "epoch": doc.get("epoch"),
               "data": {"path": str(args.data), "sha256": file_checksum(args.data)},
               "N": _eigen_summary(N), "layers": []}
    herald_layers = [1] if model.config.fast_herald else sorted(model.heralds)
    for layer, h in zip(herald_layers, out.heralds):
        tag = f"layer{layer}"
        n_res, n_hat, htilde = h.n_res.data, h.n_hat.data, h.htilde.data
        for name, mat in (("n_res", n_res), ("n_hat", n_hat), ("htilde", htilde)):
            np.savetxt(out_dir / f"{name}_{tag}.csv", mat, delimiter=",", fmt="%.17g")
        counts, edges = np.histogram(htilde, bins=50)
        np.savetxt(out_dir / f"htilde_hist_{tag}.csv", np.column_stack([edges[:-1], edges[1:], counts]),
                   delimiter=",", fmt="%.17g", header="bin_lo,bin_hi,count", comments="")
        spectrum = np.column_stack([np.linalg.eigvalsh(0.5 * (M + M.T)) for M in (N, n_res, n_hat)])
        np.savetxt(out_dir / f"spectrum_{tag}.csv", spectrum, delimiter=",", fmt="%.17g",
                   header="eig_N,eig_n_res,eig_n_hat", comments="")
        summary["layers"].append({
            "layer": layer,
            "a": h.a,
            "n_res": _eigen_summary(n_res),
            "n_hat": _eigen_summary(n_hat),
            "frobenius_N_minus_n_res": float(np.linalg.norm(N - n_res)),
            "htilde_min": float(htilde.min()),
            "htilde_max": float(htilde.max()),
        })
    _write_json(out_dir / "summary.json", summary)
    print(f"wrote {len(out.heralds)} HERALD layer dump(s) to {out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HERALD_LOG", "error").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "inspect":
            return cmd_inspect(args)
        cfg = resolve_config(args)
        return cmd_train(cfg) if args.command == "train" else cmd_cv(cfg)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, StructuralError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}\n{json.dumps(exc.health)}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
