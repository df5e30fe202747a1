"""Command-line entry point: ``vista <subcommand> ...``.

Exit codes: 0 success, 1 a check failed, 2 usage error, 3 invalid
configuration, 4 numerical failure, 5 input/output failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .config import RunConfig, load_config
from .data import SyntheticWorld, generate_dataset, ingest_csv, write_csv
from .delivery import (
    ExportLog,
    SummaryCache,
    SummaryTokens,
    consume,
    fetch_for_inference,
    publish,
    snapshot_load,
    snapshot_save,
)
from .errors import (
    ConfigError,
    CorruptSnapshot,
    DegenerateLabels,
    EmptyFile,
    NonFiniteError,
    NonFiniteLoss,
    SchemaMismatch,
    StalenessExceeded,
    UserNotFound,
)
from .gradcheck import kernel_suite, model_suite
from .metrics import evaluate
from .model import VistaModel
from .numerics import ActivationKind
from .training import TrainHistory, evaluate_model, predict_all, train

log = logging.getLogger("vista")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4, 5


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


# -- data loading ------------------------------------------------------------------

def load_split(cfg: RunConfig):
    """``(train_batches, eval_batches, world_or_None)`` for a run config."""
    if cfg.data.source == "csv":
        batches, report = ingest_csv(cfg.data.path)
        if report.skipped:
            log.warning("skipped %d malformed rows", report.skipped)
        cut = int(round(len(batches) * cfg.data.train_fraction))
        return batches[:cut], batches[cut:], None
    ds = generate_dataset(cfg.data.synthetic)
    train_b, eval_b = ds.split(cfg.data.train_fraction)
    return train_b, eval_b, ds.world


def load_eval_data(path):
    """Held-out batches from a CSV file, or the eval split described by a TOML run config."""
    path = Path(path)
    if path.suffix == ".toml":
        _, eval_b, world = load_split(load_config(path))
        return eval_b, world
    batches, _ = ingest_csv(path)
    return batches, None


# -- subcommands ---------------------------------------------------------------------

CURVE_FIELDS = ["step", "epoch", "total", "bce", "recon", "eval_auc", "eval_ne"]


def cmd_train(args):
    cfg = load_config(args.config)
    train_b, eval_b, _ = load_split(cfg)
    model = VistaModel.create(cfg.model, seed=cfg.train.seed, lr=cfg.train.lr)
    history = TrainHistory()
    rows = []
    export_log = ExportLog(cfg.output.export_log) if cfg.output.export_log else None
    exported = 0

    def export(step):
        nonlocal exported
        for b in eval_b[:cfg.output.export_users]:
            publish(export_log, SummaryTokens(b.user_id, step, model.summary_tokens(b)))
            exported += 1

    def on_step(step, parts):
        rows.append({"step": step, "epoch": epoch, "total": parts.total, "bce": parts.bce,
                     "recon": parts.recon, "eval_auc": "", "eval_ne": ""})
        if export_log is not None and cfg.output.export_every and step % cfg.output.export_every == 0:
            export(step)

    report = {}
    for epoch in range(cfg.train.epochs):
        train(model, train_b, cfg.train, history, shuffle=not args.deterministic, epoch_seed=epoch,
              on_step=on_step)
        if eval_b:
            rep = evaluate_model(model, eval_b)
            rows[-1]["eval_auc"], rows[-1]["eval_ne"] = rep.auc, rep.ne
            report = json.loads(rep.to_json())
    model.save(cfg.output.checkpoint)
    curve_path = Path(cfg.output.curve or Path(cfg.output.checkpoint).with_suffix(".curve.csv"))
    with curve_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, CURVE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    _emit({"checkpoint": str(cfg.output.checkpoint), "curve": str(curve_path), "steps": model.step,
           "train_users": len(train_b), "eval_users": len(eval_b), "exported": exported,
           "eval": report}, cfg.output.report)
    return EXIT_OK


def cmd_eval(args):
    batches, world = load_eval_data(args.data)
    if not batches:
        raise DegenerateLabels("no evaluation examples")
    labels = np.concatenate([b.labels for b in batches])
    lengths = np.concatenate([np.full(b.n_candidates, b.history_length) for b in batches])
    if args.predictor == "bayes":
        if world is None or batches[0].affinity is None:
            raise ConfigError("--predictor bayes needs synthetic data described by a .toml config")
        preds = world.bayes_probability(np.concatenate([b.affinity for b in batches]))
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --predictor bayes")
        preds = predict_all(VistaModel.load(args.checkpoint), batches)
    report = evaluate(preds, labels, lengths)
    out = json.loads(report.to_json())
    out["predictor"] = args.predictor
    if world is not None and batches[0].affinity is not None:
        from .metrics import auc
        out["bayes_auc"] = auc(np.concatenate([b.affinity for b in batches]), labels)
    _emit(out, args.out)
    return EXIT_OK


def cmd_export_cache(args):
    model = VistaModel.load(args.checkpoint)
    batches, _ = load_eval_data(args.data)
    version = args.version if args.version is not None else max(model.step, 1)
    export_log = ExportLog(args.log) if args.log else ExportLog()
    for b in batches:
        publish(export_log, SummaryTokens(b.user_id, version, model.summary_tokens(b)))
    cache = SummaryCache()
    consume(export_log, cache)
    snapshot_save(cache, args.out)
    _emit({"snapshot": str(args.out), "users": len(cache), "version": version,
           "state_hash": cache.state_hash()})
    return EXIT_OK


def _parse_requests(path):
    data = json.loads(Path(path).read_text())
    current = None
    if isinstance(data, dict):
        current = data.get("current_version")
        data = data.get("requests", [])
    if not isinstance(data, list):
        raise ConfigError(f"{path}: expected a list of requests")
    for i, r in enumerate(data):
        for key in ("user_id", "cand_items", "cand_cats"):
            if key not in r:
                raise ConfigError(f"{path}: request {i} lacks {key!r}")
        if len(r["cand_items"]) != len(r["cand_cats"]) or not r["cand_items"]:
            raise ConfigError(f"{path}: request {i} needs matching, non-empty candidate lists")
    return data, current


def cmd_infer(args):
    model = VistaModel.load(args.checkpoint)
    cache = snapshot_load(args.cache)
    requests, current = _parse_requests(args.requests)
    if args.current_version is not None:
        current = args.current_version
    if current is None:
        current = model.step
    strict = args.strict_staleness is not None
    results = []
    for r in requests:
        entry = {"user_id": r["user_id"]}
        try:
            fetched = fetch_for_inference(cache, r["user_id"], current, args.strict_staleness, strict)
        except (UserNotFound, StalenessExceeded) as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
            results.append(entry)
            continue
        probs = model.predict_from_tokens(fetched.tokens, r["cand_items"], r["cand_cats"])
        entry.update(version=fetched.version, lag=fetched.lag, predictions=[float(p) for p in probs])
        results.append(entry)
    _emit({"current_version": current, "results": results}, args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    results = []
    if args.suite in ("kernel", "all"):
        kinds = [ActivationKind(k) for k in args.activations.split(",")] if args.activations else tuple(ActivationKind)
        results += kernel_suite(seeds=args.seeds, kinds=kinds, corrupt=args.corrupt)
    if args.suite in ("model", "all"):
        results += model_suite(seeds=min(args.seeds, 5), corrupt=args.corrupt)
    failures = [r for r in results if not r.passed]
    by_suite = {}
    for r in results:
        s = by_suite.setdefault(r.suite, {"checks": 0, "failed": 0, "worst": 0.0, "worst_check": None,
                                          "tolerance": r.tolerance})
        s["checks"] += 1
        s["failed"] += not r.passed
        if r.worst >= s["worst"]:
            s["worst"], s["worst_check"] = r.worst, f"{r.label} {r.worst_tensor}"
    _emit({"passed": not failures, "suites": by_suite,
           "failures": [{"check": r.label, "tensor": r.worst_tensor, "error": r.worst} for r in failures[:20]]},
          args.out)
    return EXIT_OK if not failures else EXIT_CHECK


def cmd_bench(args):
    grid = tuple(int(x) for x in args.grid.split(","))
    rows = []
    if args.suite in ("kernels", "all"):
        rows += bench_mod.kernel_bench(grid, d=args.d, reps=args.reps)
    if args.suite in ("latency", "all"):
        rows += bench_mod.latency_bench(grid, d=args.d, reps=args.reps)
    text = bench_mod.to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    summary = {}
    kernels = {r.kernel for r in rows}
    if len(grid) > 1:
        for k in sorted(kernels & {"qla", "softmax"}):
            summary[f"{k}_slope"] = bench_mod.loglog_slope(rows, k)
        for k in sorted(kernels & {"cached", "full"}):
            times = [r.wall_time for r in rows if r.kernel == k]
            summary[f"{k}_max_over_min"] = max(times) / min(times)
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_generate(args):
    cfg = load_config(args.config)
    ds = generate_dataset(cfg.data.synthetic)
    write_csv(ds.batches, args.out)
    _emit({"users": len(ds.batches), "rows": int(sum(b.n_candidates for b in ds.batches)),
           "bayes_auc": ds.bayes_auc(), "out": str(args.out)})
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="vista", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--deterministic", action="store_true", help="fixed user order, no shuffling")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="NE/AUC on held-out data (.csv, or .toml for the synthetic eval split)")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--predictor", choices=["model", "bayes"], default="model")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="score candidates from cached summaries only")
    i.add_argument("--cache", required=True)
    i.add_argument("--requests", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--strict-staleness", type=int, metavar="K")
    i.add_argument("--current-version", type=int)
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    x = sub.add_parser("export-cache", help="summarize users, publish, and snapshot the cache")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--log", help="also append records to this on-disk export log")
    x.add_argument("--version", type=int)
    x.set_defaults(func=cmd_export_cache)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    g.add_argument("--suite", choices=["kernel", "model", "all"], default="all")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--activations", help="comma-separated subset for the kernel suite")
    g.add_argument("--corrupt", help=argparse.SUPPRESS)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="wall-time/peak-allocation CSV over sequence lengths")
    b.add_argument("--grid", default=",".join(str(n) for n in bench_mod.DEFAULT_GRID))
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--d", type=int, default=64)
    b.add_argument("--suite", choices=["kernels", "latency", "all"], default="all")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("generate", help="write the synthetic dataset of a config as CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, NonFiniteError, DegenerateLabels, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CorruptSnapshot, SchemaMismatch, EmptyFile, json.JSONDecodeError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
