"""Command-line front end: train, evaluate, bench, oracle-check.

Settings come from an optional TOML file (``--config``) and from flags; a
flag given on the command line wins over the file. The file may hold
top-level keys and a table per subcommand, e.g.::

    seed = 3
    [train]
    data = "blobs:n=2000,d=10,c=5"
    centers = 200
    T = "auto"
    [train.ep2]
    epochs = 2

Exit codes: 0 ok, 1 failed check or numeric failure, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bench import BenchConfig, bench_summary, run_sweep, write_csv, write_trace
from .checks import MC_TRIALS, run_suite
from .data import metrics, parse_data_spec
from .errors import InputError, NumericError
from .kernels import KernelSpec
from .model import load_model, predict, save_model
from .oracle import DENSE_GUARD
from .projection import EP2Config
from .solver import TrainConfig, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("eigenpro4")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "KSLV_THREADS"


class UsageError(Exception):
    pass


def _period(text):
    if str(text) == "auto":
        return "auto"
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a positive integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("period must be >= 1")
    return value


def _lr(text):
    return "auto" if str(text) == "auto" else float(text)


def _int_list(text):
    if isinstance(text, list):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v]


def _str_list(text):
    if isinstance(text, list):
        return [str(v) for v in text]
    return [v for v in str(text).split(",") if v]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--kernel", choices=["laplace", "gaussian"])
    p.add_argument("--bandwidth", type=float)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eigenpro4", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a kernel model and write model + report")
    _add_common(t)
    t.add_argument("--data", help="blobs:n=..,d=..,c=.. | file.csv | binary container")
    t.add_argument("--centers", type=int, help="number of model centers drawn from the training set")
    t.add_argument("--m", type=int, help="batch size")
    t.add_argument("--s", type=int, help="Nystrom subsample size")
    t.add_argument("--q", type=int, help="preconditioner level")
    t.add_argument("--T", type=_period, help="projection period: auto or an integer")
    t.add_argument("--proj", choices=["exact", "inexact"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=_lr, help="learning rate or auto")
    t.add_argument("--ep2-epochs", type=float, help="inner solver epochs per projection")
    t.add_argument("--precision", choices=["f32", "f64"])
    t.add_argument("--test-fraction", type=float)
    t.add_argument("--trace-every", type=int)
    t.add_argument("--out", type=Path, help="output directory")

    e = sub.add_parser("evaluate", help="score a saved model on a dataset")
    _add_common(e)
    e.add_argument("--model", type=Path)
    e.add_argument("--data")
    e.add_argument("--out", type=Path, help="optional JSON file for the metrics")

    b = sub.add_parser("bench", help="sweep p for ep4, ep3 mode and direct solve")
    _add_common(b)
    b.add_argument("--data")
    b.add_argument("--p", type=_int_list, help="comma-separated center counts")
    b.add_argument("--methods", type=_str_list, help="comma-separated subset of ep4,ep3,direct")
    b.add_argument("--m", type=int)
    b.add_argument("--s", type=int)
    b.add_argument("--q", type=int)
    b.add_argument("--epochs", type=int)
    b.add_argument("--ep2-epochs", type=float)
    b.add_argument("--test-fraction", type=float)
    b.add_argument("--parallel", type=int, help="worker processes (default: sequential)")
    b.add_argument("--out", type=Path)

    o = sub.add_parser("oracle-check", help="run the oracle self-check suite")
    _add_common(o)
    o.add_argument("--trials", type=int, help=f"Monte Carlo trials (default {MC_TRIALS})")
    o.add_argument("--epochs", type=int, help="epochs for the min-norm check")
    o.add_argument("--model", type=Path, help="also verify that a saved model loads cleanly")
    return parser


DEFAULTS = {
    "common": {"seed": 0, "kernel": "laplace", "bandwidth": 1.0, "verbose": False},
    "train": {"data": "blobs:n=2000,d=10,c=5", "centers": None, "m": 64, "s": None, "q": None,
              "T": "auto", "proj": "inexact", "epochs": 10, "lr": "auto", "ep2_epochs": 1.0,
              "precision": "f64", "test_fraction": 0.2, "trace_every": 0, "out": Path("run")},
    "evaluate": {"model": None, "data": None, "out": None},
    "bench": {"data": "blobs:n=2500,d=10,c=5", "p": [64, 128, 256, 512, 1024],
              "methods": ["ep4", "ep3", "direct"], "m": 8, "s": 16, "q": 2, "epochs": 1,
              "ep2_epochs": 1.0, "test_fraction": 0.2, "parallel": 0, "out": Path("bench")},
    "oracle-check": {"trials": MC_TRIALS, "epochs": 50, "model": None},
}

_CONVERT = {"T": _period, "lr": _lr, "p": _int_list, "methods": _str_list, "out": Path,
            "model": Path}


def _file_settings(path: Path | None, command: str) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    out = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    section = doc.get(command, {})
    if "ep2" in section and isinstance(section["ep2"], dict):
        for k, v in section.pop("ep2").items():
            out[f"ep2_{k}"] = v
    out.update(section)
    out = {k.replace("-", "_"): v for k, v in out.items()}
    allowed = set(DEFAULTS["common"]) | set(DEFAULTS[command])
    unknown = sorted(set(out) - allowed)
    if unknown:
        raise UsageError(f"{path}: unknown key(s) for {command}: {', '.join(unknown)}")
    for k, conv in _CONVERT.items():
        if k in out and out[k] is not None:
            out[k] = conv(out[k])
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {**DEFAULTS["common"], **DEFAULTS[args.command]}
    cfg.update(_file_settings(args.config, args.command))
    for k, v in vars(args).items():
        if k in cfg and v is not None and v is not False:
            cfg[k] = v
    return cfg


def _spec(cfg) -> KernelSpec:
    return KernelSpec(cfg["kernel"], float(cfg["bandwidth"]))


def _split(cfg):
    ds = parse_data_spec(cfg["data"], seed=cfg["seed"])
    return ds.split(cfg["test_fraction"], seed=cfg["seed"])


def cmd_train(cfg: dict) -> int:
    if cfg["centers"] is None:
        raise UsageError("train: --centers is required (flag or config file)")
    tr, te = _split(cfg)
    p = cfg["centers"]
    if not 1 <= p <= tr.n:
        raise UsageError(f"--centers must lie in [1, {tr.n}]")
    rng = np.random.default_rng([cfg["seed"], 101])
    Z = tr.X[np.sort(rng.choice(tr.n, p, replace=False))]
    tcfg = TrainConfig(batch_size=cfg["m"], nystrom_size=cfg["s"], level=cfg["q"],
                       period=cfg["T"], learning_rate=cfg["lr"], epochs=cfg["epochs"],
                       seed=cfg["seed"], projection=cfg["proj"],
                       ep2=EP2Config(epochs=cfg["ep2_epochs"]), precision=cfg["precision"],
                       trace_every=cfg["trace_every"])
    spec = _spec(cfg)
    rep = train(tr.X, tr.Y(), Z, tcfg, spec, eval_data=(te.X, te.Y()) if te.n else None)
    out: Path = cfg["out"]
    out.mkdir(parents=True, exist_ok=True)
    save_model(rep.model, out / "model.kslv")
    summary = {"train": metrics(predict(rep.model, tr.X), tr.labels if tr.is_classification
                                else tr.targets[:, 0])}
    if te.n:
        summary["test"] = metrics(predict(rep.model, te.X), te.labels if te.is_classification
                                  else te.targets[:, 0])
    doc = rep.to_json()
    doc["resolved"] = {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}
    doc["data"] = {"name": tr.name, "provenance": tr.provenance, "n_train": tr.n, "n_test": te.n}
    doc["final"] = summary
    (out / "report.json").write_text(json.dumps(doc, indent=1))
    print(json.dumps({"period": rep.period, "learning_rate": rep.learning_rate, **summary}))
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    if cfg["model"] is None or cfg["data"] is None:
        raise UsageError("evaluate: --model and --data are required")
    model = load_model(cfg["model"])
    ds = parse_data_spec(cfg["data"], seed=cfg["seed"])
    if ds.d != model.Z.shape[1]:
        raise InputError(f"data has d={ds.d}, model expects d={model.Z.shape[1]}")
    values = predict(model, ds.X)
    result = metrics(values, ds.labels if ds.is_classification else ds.targets[:, 0])
    result["n"] = ds.n
    if cfg["out"] is not None:
        Path(cfg["out"]).write_text(json.dumps(result, indent=1))
    print(json.dumps(result))
    return EXIT_OK


def _threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def cmd_bench(cfg: dict) -> int:
    tr, te = _split(cfg)
    bcfg = BenchConfig(ps=cfg["p"], methods=cfg["methods"], batch_size=cfg["m"],
                       nystrom_size=cfg["s"], level=cfg["q"], epochs=cfg["epochs"],
                       ep2_epochs=cfg["ep2_epochs"], seed=cfg["seed"])
    if "direct" in bcfg.methods:
        too_big = [p for p in bcfg.ps if p > DENSE_GUARD]
        if too_big:
            raise InputError(f"direct solve refuses p > {DENSE_GUARD} (got {too_big}); "
                             "drop 'direct' from --methods for larger sweeps")
    workers = cfg["parallel"]
    cap = _threads()
    if workers and cap:
        workers = min(workers, cap)
    rows = run_sweep(tr, te, _spec(cfg), bcfg, parallel=workers)
    out: Path = cfg["out"]
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out / "bench.csv")
    write_trace(rows, out / "trace.csv")
    summary = bench_summary(rows, bcfg)
    summary["schema_version"] = 1
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    for r in rows:
        print(f"{r.method:6s} p={r.p:5d} T={r.T:4d} flops/batch={r.amortized_flops:.4g} "
              f"test_acc={r.test_acc:.4f}")
    for method, slope in summary["slopes"].items():
        print(f"slope {method}: {slope:.3f}")
    return EXIT_OK


def cmd_oracle_check(cfg: dict) -> int:
    ok = True
    if cfg["model"] is not None:
        model = load_model(cfg["model"])
        finite = bool(np.all(np.isfinite(model.alpha)) and np.all(np.isfinite(model.Z)))
        print(f"{'PASS' if finite else 'FAIL'} model-file: {cfg['model']} p={model.p} c={model.c}")
        ok &= finite
    if cfg["trials"] < 2:
        raise UsageError("--trials must be at least 2")
    for res in run_suite(trials=cfg["trials"], seed=cfg["seed"], epochs=cfg["epochs"]):
        print(res.line())
        ok &= res.passed
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "bench": cmd_bench,
            "oracle-check": cmd_oracle_check}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        cfg = resolve(args)
        logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        threads = _threads()
        if threads:
            limiter = threadpool_limits(limits=threads)
        else:
            limiter = contextlib.nullcontext()
        with limiter:
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
