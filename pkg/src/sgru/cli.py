"""Command line entry point: synth, train, eval, predict, gradcheck, ablate.

Exit codes: 0 success, 1 check failure, 2 usage or data error, 3 divergence.
Training settings resolve as defaults < --config JSON < explicit flags.
SGRU_OUT_DIR supplies --out-dir when the flag is absent.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, generate_synthetic, load_channels, make_windows, write_csv
from .gradcheck import check_model_gradients, group_errors
from .metrics import MetricError
from .model import Checkpoint, ModelDims, Variant, init_params, parameter_count, write_atomic
from .tensor import DimensionError
from .training import (TrainConfig, TrainingDiverged, evaluate, history_csv, predict_windows,
                       train, _checkpoint_scaler, check_compatible)

log = logging.getLogger("sgru")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def parse_int_list(text: str) -> list[int]:
    """'1..3' -> [1, 2, 3]; '3,6,9' -> [3, 6, 9]."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            out = list(range(int(lo), int(hi) + 1))
        else:
            out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse integer list {text!r}") from None
    if not out:
        raise UsageError(f"empty integer list {text!r}")
    return out


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def out_dir_arg(value: str | None) -> Path:
    value = value or os.environ.get("SGRU_OUT_DIR")
    if not value:
        raise UsageError("--out-dir is required (or set SGRU_OUT_DIR)")
    return Path(value)


def load_dataset(paths, P: int, F: int, D_out: int = 1):
    try:
        series = load_channels(paths)
    except FileNotFoundError as exc:
        raise UsageError(f"data file not found: {exc.filename}") from None
    return series, make_windows(series, P, F, D_out=D_out)


def resolve_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                values.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    overrides = {
        "variant": getattr(args, "variant", None),
        "max_epochs": getattr(args, "epochs", None),
        "H": getattr(args, "hidden", None),
        "d_emb": getattr(args, "d_emb", None),
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "lr", None),
        "patience": getattr(args, "patience", None),
        "max_steps": getattr(args, "max_steps", None),
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "max_epochs" in values and "patience" not in values:
        values["patience"] = min(TrainConfig.patience, values["max_epochs"])
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def seeds_arg(args) -> list[int]:
    if args.seeds:
        return parse_int_list(args.seeds)
    return [args.seed]


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    if args.nodes < 1 or args.days < 1:
        raise UsageError("--nodes and --days must be >= 1")
    series = generate_synthetic(args.nodes, args.days, args.seed, args.lag, args.noise)
    try:
        write_csv(series, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    print(f"T={series.T} N={series.N}")
    return EXIT_OK


def _train_one(cfg: TrainConfig, data_paths, out: Path, horizons) -> dict:
    started = time.time()
    series, data = load_dataset(data_paths, cfg.P, cfg.F, cfg.D_out)
    out.mkdir(parents=True, exist_ok=True)
    status, message = "ok", ""
    try:
        result = train(cfg, data)
        ckpt, history = result.checkpoint, result.history
    except TrainingDiverged as exc:
        status, message = "diverged", str(exc)
        ckpt, history = exc.checkpoint, exc.history
    paths = {"history": str(out / "history.csv")}
    write_atomic(out / "history.csv", history_csv(history))
    metrics = {}
    if ckpt is not None:
        ckpt.save(out / "checkpoint.json")
        paths["checkpoint"] = str(out / "checkpoint.json")
        for split in ("val", "test"):
            if data.count(split):
                metrics[split] = json.loads(evaluate(ckpt, data, split, horizons).to_json())
    dims = cfg.dims_for(data)
    manifest = {
        "status": status,
        "message": message,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "dataset": {"paths": [str(p) for p in data_paths], "fingerprint": series.fingerprint(),
                    "T": series.T, "N": series.N, "D": series.D},
        "parameter_count": parameter_count(init_params(dims, cfg.variant)),
        "epochs_run": len(history),
        "metrics": metrics,
        "version": version_string(),
        "wall_clock_seconds": round(time.time() - started, 3),
        "outputs": paths,
    }
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2))
    return manifest


def _aggregate(manifests: list[dict]) -> dict:
    agg: dict = {"seeds": [m["seed"] for m in manifests], "variant": manifests[0]["config"]["variant"]}
    for split in ("val", "test"):
        rows = [m["metrics"][split] for m in manifests if split in m["metrics"]]
        if not rows:
            continue
        entry = {k: float(np.mean([r[k] for r in rows])) for k in ("mae", "rmse", "mape")}
        entry["per_horizon_mae"] = {h: float(np.mean([r["per_horizon_mae"][h] for r in rows]))
                                    for h in rows[0]["per_horizon_mae"]}
        agg[split] = entry
    return agg


def cmd_train(args) -> int:
    base = resolve_config(args)
    out = out_dir_arg(args.out_dir)
    horizons = [h for h in parse_int_list(args.horizons) if h <= base.F]
    manifests = []
    for seed in seeds_arg(args):
        cfg = TrainConfig.from_dict({**base.to_dict(), "seed": seed})
        m = _train_one(cfg, args.data, out / f"seed_{seed}", horizons)
        manifests.append(m)
        val = m["metrics"].get("val", {}).get("mae")
        print(f"seed {seed}: {m['status']} epochs={m['epochs_run']} params={m['parameter_count']} "
              f"val_mae={val}")
    if len(manifests) > 1:
        write_atomic(out / "aggregate.json", json.dumps(_aggregate(manifests), indent=2))
    return EXIT_DIVERGED if any(m["status"] == "diverged" for m in manifests) else EXIT_OK


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    d = ckpt.params.dims
    _, data = load_dataset(args.data, d.P, d.F, d.D_out)
    horizons = parse_int_list(args.horizons)
    if any(h > d.F for h in horizons):
        raise UsageError(f"horizons {horizons} exceed F={d.F}")
    report = evaluate(ckpt, data, args.split, horizons)
    text = report.to_json()
    print(text)
    out = args.out or str(Path(args.checkpoint).with_name(f"metrics_{args.split}.json"))
    write_atomic(out, text + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    d = ckpt.params.dims
    _, data = load_dataset(args.data, d.P, d.F, d.D_out)
    check_compatible(ckpt, data)
    pred = predict_windows(ckpt.params, data.inputs[args.split], _checkpoint_scaler(ckpt, data))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    multi = d.D_out > 1
    w.writerow(["window_index", "horizon_step", "node"] + (["channel"] if multi else []) + ["prediction"])
    for i in range(pred.shape[0]):
        for f in range(d.F):
            for n in range(d.N):
                for c in range(d.D_out):
                    w.writerow([i, f + 1, n] + ([c] if multi else []) + [repr(float(pred[i, f, n, c]))])
    write_atomic(args.out, buf.getvalue())
    print(f"wrote {pred.shape[0] * d.F * d.N * d.D_out} predictions to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dims_list = parse_int_list(args.dims)
    if len(dims_list) != 6 or min(dims_list) < 1:
        raise UsageError("--dims needs six positive integers N,P,F,H,d,d_prime")
    N, P, F, H, d, de = dims_list
    dims = ModelDims(P=P, F=F, N=N, D=1, D_out=1, d=d, d_emb=de, H=H)
    variants = [v.value for v in Variant] if args.variant == "all" else [args.variant]
    ok = True
    for v in variants:
        groups = group_errors(check_model_gradients(dims, v, args.seed, args.eps))
        for name, err in groups.items():
            passed = err < args.tolerance
            ok &= passed
            print(f"{v:9s} {name:12s} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


def _ablate_job(job) -> tuple[str, int, dict]:
    cfg_dict, data_paths, split, horizons = job
    cfg = TrainConfig.from_dict(cfg_dict)
    _, data = load_dataset(data_paths, cfg.P, cfg.F, cfg.D_out)
    ckpt = train(cfg, data).checkpoint
    report = evaluate(ckpt, data, split, horizons)
    return cfg.variant, cfg.seed, report.per_horizon_mae


def ablation_table(results, horizons) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["variant"]
    for h in horizons:
        header += [f"h{h}_median_mae", f"h{h}_mean_mae"]
    w.writerow(header)
    for v in Variant:
        row = [v.value]
        for h in horizons:
            vals = [r[h] for variant, _, r in results if variant == v.value]
            row += [repr(float(np.median(vals))), repr(float(np.mean(vals)))]
        w.writerow(row)
    return buf.getvalue()


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    out = out_dir_arg(args.out_dir)
    horizons = [h for h in parse_int_list(args.horizons) if h <= base.F]
    jobs = [({**base.to_dict(), "variant": v.value, "seed": s}, args.data, args.split, horizons)
            for v in Variant for s in parse_int_list(args.seeds)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_ablate_job, jobs))
    else:
        results = [_ablate_job(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    table = ablation_table(results, horizons)
    write_atomic(out / "ablation.csv", table)
    raw = [{"variant": v, "seed": s, "per_horizon_mae": {str(k): x for k, x in r.items()}}
           for v, s, r in results]
    write_atomic(out / "ablation_runs.json", json.dumps(raw, indent=2))
    print(table, end="")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def _add_train_overrides(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--epochs", type=int, help="max_epochs override")
    p.add_argument("--hidden", type=int, help="H override")
    p.add_argument("--d-emb", type=int, dest="d_emb", help="embedding width override")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-steps", type=int, dest="max_steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgru", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic lagged traffic CSV")
    p.add_argument("--nodes", type=int, default=4)
    p.add_argument("--days", type=int, default=2)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--lag", type=int, default=6, help="delay between neighbouring nodes, in steps")
    p.add_argument("--noise", type=float, default=0.05, help="noise std in flow units")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant over one or more seeds")
    p.add_argument("--data", nargs="+", required=True, help="CSV file(s), one per channel")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--seeds", help="seed list such as 1..10 or 1,2,3 (overrides --seed)")
    p.add_argument("--out-dir")
    p.add_argument("--horizons", default="3,6,9,12")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--horizons", default="3,6,9,12")
    p.add_argument("--out", help="JSON report path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="export forecasts as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--variant", choices=["all"] + [v.value for v in Variant], default="all")
    p.add_argument("--dims", default="4,3,2,5,2,3", help="N,P,F,H,d,d_prime")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train all four variants and tabulate MAE by horizon")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--seeds", default="1..5")
    p.add_argument("--out-dir")
    p.add_argument("--split", choices=["val", "test"], default="val")
    p.add_argument("--horizons", default="3,6,9,12")
    p.add_argument("--workers", type=int, default=1)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError, DimensionError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
