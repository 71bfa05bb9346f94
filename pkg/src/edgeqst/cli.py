"""Command-line interface: gen, train, calibrate, quantize, eval, bench, reconstruct, report.

Every subcommand accepts ``--config FILE`` with ``key=value`` lines (keys are
flag names without the leading dashes); flags given on the command line
override the file.  Set QST_LOG=error|warn|info|debug for diagnostics on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from edgeqst import datagen, nn, quant, report
from edgeqst.bench import time_engine, throughput
from edgeqst.gaussian import DbLevels, StateParams, db_from_params, params_from_db
from edgeqst.pipeline import (
    FP32Engine,
    INT8Engine,
    evaluate_fidelity_sweep,
    reconstruct,
)

log = logging.getLogger("edgeqst")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    pass


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("QST_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)


def _stamp(args) -> str | None:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z") if getattr(args, "stamp", False) else None


def _load_engine(kind: str, path: str):
    if kind == "fp32":
        return FP32Engine(nn.load_model(path))
    if kind == "int8":
        return INT8Engine(quant.load_qmodel(path))
    raise CliError(f"unknown engine {kind!r}")


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> None:
    cfg = datagen.GenConfig(n_examples=args.n, seq_len=args.seq_len, global_seed=args.seed,
                            schedule_id=args.schedule)
    ds = datagen.generate_dataset(cfg, threads=args.threads)
    datagen.write_dataset(ds, args.out)
    log.info("wrote %d examples to %s", len(ds), args.out)


def cmd_train(args) -> None:
    ds = datagen.read_dataset(args.data)
    cfg = nn.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                         arch_id=args.arch)
    result = nn.train(ds, cfg)
    nn.save_model(result.model, args.out)
    log_path = args.log or str(Path(args.out).with_suffix(".train.csv"))
    report._write(log_path, result.log_csv())
    log.info("best epoch %d; model %s; log %s", result.best_epoch, args.out, log_path)


def _calib_stats(model, path: str, percentile: float | None):
    if path.endswith(".json"):
        return quant.CalibStats.from_json(Path(path).read_text())
    ds = datagen.read_dataset(path)
    return quant.collect_calibration_stats(model, ds.values, percentile=percentile)


def cmd_calibrate(args) -> None:
    model = nn.load_model(args.model)
    stats = _calib_stats(model, args.calib, args.percentile)
    report._write(args.out, stats.to_json())


def cmd_quantize(args) -> None:
    model = nn.load_model(args.model)
    pct = args.percentile if args.method == "percentile" else None
    stats = _calib_stats(model, args.calib, pct)
    qm = quant.quantize_model(model, stats, args.method)
    quant.save_qmodel(qm, args.out)


def cmd_eval(args) -> None:
    engine = _load_engine(args.engine, args.model)
    ds = datagen.read_dataset(args.data)
    rep = evaluate_fidelity_sweep(engine, ds, bins=args.bins, threads=args.threads)
    report.emit_csv(rep, args.out)
    if args.examples:
        report._write(args.examples, report.examples_csv(rep))
    if args.svg:
        report.emit_svg([(args.engine, rep)], args.svg, "fidelity", stamp=_stamp(args))
    print(f"engine={args.engine} n={len(ds)} mean_fidelity={rep.mean_fidelity:.6f} "
          f"std_fidelity={rep.std_fidelity:.6f}")


def cmd_bench(args) -> None:
    engine = _load_engine(args.engine, args.model)
    ds = datagen.read_dataset(args.data)
    run = time_engine(engine, ds, n=args.n, warmup=args.warmup)
    report.emit_csv(run.stats, args.out)
    if args.raw:
        report._write(args.raw, "latency_ms\n" + "".join(f"{v!r}\n" for v in run.latencies_ms.tolist()))
    s = run.stats
    print(f"engine={s.engine} n={s.n} mean_ms={s.mean_ms:.4f} median_ms={s.median_ms:.4f} "
          f"p95_ms={s.p95_ms:.4f} total_s={s.total_s:.3f}")
    if args.throughput:
        ips = throughput(engine, ds, n=args.n, threads=args.threads)
        print(f"throughput_per_s={ips:.1f} threads={args.threads}")


def _reconstruct_params(args) -> StateParams:
    if args.index is not None:
        if not args.data:
            raise CliError("--index needs --data")
        ds = datagen.read_dataset(args.data)
        if not 0 <= args.index < len(ds):
            raise CliError(f"--index {args.index} out of range for {len(ds)} examples")
        if args.model:
            return _load_engine(args.engine, args.model).infer_one(ds.values[args.index])
        return ds.params(args.index)
    if args.squeezing_db is not None:
        anti = args.antisqueezing_db if args.antisqueezing_db is not None else args.squeezing_db
        return params_from_db(DbLevels(args.squeezing_db, anti), args.theta)
    if args.r is None:
        raise CliError("give --r/--theta/--nbar, --squeezing-db, or --data with --index")
    return StateParams(args.r, args.theta, args.nbar)


def cmd_reconstruct(args) -> None:
    p = _reconstruct_params(args)
    b = reconstruct(p, density=not args.no_density, dim=args.dim,
                    wigner_range=args.wigner_range, wigner_step=args.wigner_step)
    d = db_from_params(p)
    summary = {
        "r": p.r, "theta": p.theta, "nbar": p.nbar,
        "squeezing_db": d.squeezing_db, "antisqueezing_db": d.antisqueezing_db,
        "n_total": b.photons[0], "n_pure": b.photons[1], "n_env": b.photons[2],
        "trace_deficit": b.trace_deficit, "warnings": b.warnings,
    }
    if args.out:
        prefix = args.out
        report._write(prefix + ".json", json.dumps(summary, indent=1) + "\n")
        if b.density is not None:
            report._write(prefix + ".density.csv", report.density_csv(b.density))
        if b.wigner is not None:
            report._write(prefix + ".wigner.csv", report.wigner_csv(b.wigner_x, b.wigner_p, b.wigner))
    print(" ".join(f"{k}={v:.6g}" for k, v in summary.items() if isinstance(v, float)))


def cmd_report(args) -> None:
    if bool(args.fidelity) == bool(args.bench):
        raise CliError("give exactly one of --fidelity or --bench")
    if args.fidelity:
        labels = args.labels.split(",") if args.labels else [Path(f).stem for f in args.fidelity]
        if len(labels) != len(args.fidelity):
            raise CliError("--labels count does not match --fidelity files")
        series = []
        for label, path in zip(labels, args.fidelity):
            rows = report.read_fidelity_csv(path)
            series.append((label, [
                (float(r["bin_lo_db"]), float(r["bin_hi_db"]), int(r["count"]),
                 float(r["mean_fidelity"]) if r["mean_fidelity"] else None,
                 float(r["std_fidelity"]) if r["std_fidelity"] else None) for r in rows]))
        report.emit_svg(series, args.out, "fidelity", stamp=_stamp(args))
    else:
        stats = [s for path in args.bench for s in report.read_bench_csv(path)]
        report.emit_svg(stats, args.out, "latency", stamp=_stamp(args))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeqst", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="key=value file; command-line flags override it")
        return p

    p = add("gen", cmd_gen, "generate a labeled quadrature dataset (.qds)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seq-len", type=int, default=datagen.SEQ_LEN)
    p.add_argument("--schedule", type=int, default=0, choices=[0, 1])
    p.add_argument("--threads", type=int, default=1)

    p = add("train", cmd_train, "train the FP32 network (.qnn) and write the epoch log CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log CSV (default: OUT with .train.csv suffix)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arch", default="qst-cnn-v1", choices=sorted(nn.ARCHS))

    p = add("calibrate", cmd_calibrate, "collect activation ranges over a calibration set (JSON)")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True, help="calibration dataset (.qds)")
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float, default=None)

    p = add("quantize", cmd_quantize, "post-training INT8 quantization (.qnq)")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True, help="calibration dataset (.qds) or stats (.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="minmax", choices=["minmax", "percentile"])
    p.add_argument("--percentile", type=float, default=99.99)

    p = add("eval", cmd_eval, "fidelity sweep over a labeled dataset")
    p.add_argument("--engine", required=True, choices=["fp32", "int8"])
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", required=True, help="binned fidelity CSV")
    p.add_argument("--examples", help="optional per-example CSV")
    p.add_argument("--svg", help="optional fidelity plot")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--stamp", action="store_true")

    p = add("bench", cmd_bench, "per-inference latency benchmark")
    p.add_argument("--engine", required=True, choices=["fp32", "int8"])
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--out", required=True, help="BenchStats CSV")
    p.add_argument("--raw", help="optional raw latency dump (ms, one per line)")
    p.add_argument("--throughput", action="store_true", help="also report batched inferences/sec")
    p.add_argument("--threads", type=int, default=1)

    p = add("reconstruct", cmd_reconstruct, "density matrix, Wigner grid and photon numbers")
    p.add_argument("--r", type=float)
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--nbar", type=float, default=0.0)
    p.add_argument("--squeezing-db", type=float)
    p.add_argument("--antisqueezing-db", type=float)
    p.add_argument("--data")
    p.add_argument("--index", type=int)
    p.add_argument("--model", help="estimate parameters with this model instead of using labels")
    p.add_argument("--engine", default="fp32", choices=["fp32", "int8"])
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--no-density", action="store_true")
    p.add_argument("--wigner-range", type=float)
    p.add_argument("--wigner-step", type=float, default=0.1)
    p.add_argument("--out", help="output prefix")

    p = add("report", cmd_report, "render fidelity or latency CSVs as SVG")
    p.add_argument("--fidelity", nargs="+")
    p.add_argument("--bench", nargs="+")
    p.add_argument("--labels", help="comma-separated series labels for --fidelity")
    p.add_argument("--out", required=True)
    p.add_argument("--stamp", action="store_true")
    return parser


def _config_args(path: str) -> list[str]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            out.append(flag)
        elif value.lower() in ("false", "no", "off"):
            continue
        else:
            out += [flag, value]
    return out


def _expand_config(argv: list[str]) -> list[str]:
    """Insert the --config file's flags right after the subcommand so that
    explicit flags, which come later, win."""
    if "--config" not in argv and not any(a.startswith("--config=") for a in argv):
        return argv
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
            break
        if a.startswith("--config="):
            path = a.split("=", 1)[1]
            break
    else:
        return argv
    return argv[:1] + _config_args(path) + argv[1:]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        argv = _expand_config(argv)
    except (CliError, OSError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CliError, ValueError, OSError, OverflowError, FloatingPointError, NotImplementedError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
