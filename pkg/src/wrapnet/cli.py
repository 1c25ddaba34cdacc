"""Command-line entry point: ``wrapnet <command> [options]``.

Every command writes ``run.json`` (resolved parameters, versions, outputs)
into its output directory.  Exit codes: 0 success, 2 configuration error,
3 numerical divergence (or an unreachable calibration target), 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import platform
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (CalibrationError, ConfigError, DivergenceError, ManifestVersionError, WrapnetError)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
SEED_ENV = "WRAPNET_SEED"
CSV_SCHEMA = 1

log = logging.getLogger("wrapnet")


class CalibrationUnreachable(WrapnetError):
    pass


# ---------------------------------------------------------------- plumbing

def resolve_seed(flag, file_value=None) -> tuple[int, str]:
    """Seed and where it came from: flag, then config file, then WRAPNET_SEED, then 0."""
    if flag is not None:
        return int(flag), "flag"
    if file_value is not None:
        return int(file_value), "config"
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env), "env"
        except ValueError:
            raise ConfigError([f"{SEED_ENV}: must be an integer (got {env!r})"]) from None
    return 0, "default"


def read_config_file(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    if not isinstance(doc, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return doc


def parse_assignments(items, what="--set") -> dict:
    """``KEY=VALUE`` pairs; values are parsed as JSON when possible."""
    out, problems = {}, []
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            problems.append(f"{what} {item!r}: expected KEY=VALUE")
            continue
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    if problems:
        raise ConfigError(problems)
    return out


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    return v


class Run:
    """Output directory plus the provenance record written at the end."""

    def __init__(self, args, params: dict):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.record = {
            "command": args.command,
            "argv": list(args.argv),
            "params": {k: _jsonable(v) for k, v in params.items()},
            "versions": {"wrapnet": __version__, "numpy": np.__version__,
                         "python": platform.python_version(), "backend": _backend_name()},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "outputs": [],
            "status": "running",
        }

    def path(self, name: str) -> Path:
        p = self.out / name
        self.record["outputs"].append(name)
        return p

    def finish(self, status: str = "ok", **extra):
        self.record["status"] = status
        self.record["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        self.record.update({k: _jsonable(v) for k, v in extra.items()})
        (self.out / "run.json").write_text(json.dumps(self.record, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")


def _backend_name() -> str:
    from .kernels import BACKEND
    return BACKEND


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def load_inputs(path) -> np.ndarray:
    """``.npy`` array or CSV of numbers (a header row is skipped)."""
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    with open(p, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        rows = rows[1:]
    return np.array([[float(v) for v in r] for r in rows if r], dtype=np.float64)


def model_dataset(model):
    """Regenerate the synthetic dataset recorded in a trained model's metadata."""
    from .train import TrainConfig, make_synthetic_dataset
    cfg_doc = model.metadata.get("config")
    if cfg_doc is None:
        raise ConfigError(["model metadata has no training config; pass --data"])
    cfg = TrainConfig.from_dict(cfg_doc)
    return make_synthetic_dataset(cfg.seed, cfg.n_samples, cfg.difficulty, cfg.classes, cfg.features)


def select_data(args, model, default_split: str):
    """Inputs from ``--data`` or the model's synthetic split; labels when known."""
    if args.data:
        return load_inputs(args.data), None
    ds = model_dataset(model)
    split = args.split or default_split
    return getattr(ds, f"x_{split}"), getattr(ds, f"y_{split}")


# ---------------------------------------------------------------- commands

TRAIN_FLAGS = {
    "slope": float, "p_target": float, "lambda_overflow": float, "lambda_carry": float,
    "acc_bits": int, "weight_bits": int, "carry_adaptation": str, "hidden": int,
    "n_samples": int, "difficulty": float,
}


def build_train_config(args):
    from .train import TrainConfig
    doc = read_config_file(args.config)
    doc.update(parse_assignments(args.set))
    for name in TRAIN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            doc[name] = v
    if args.epochs:
        epochs = dict(doc.get("epochs", {}))
        epochs.update(parse_assignments(args.epochs, "--epochs"))
        doc["epochs"] = epochs
    seed, source = resolve_seed(args.seed, doc.get("seed"))
    doc["seed"] = seed
    cfg = TrainConfig.from_dict(doc).validate()
    return cfg, source


def cmd_train(args) -> int:
    from .netgraph import save_model
    from .train import train_pipeline
    cfg, source = build_train_config(args)
    run = Run(args, {**cfg.to_dict(), "seed_source": source})
    t0 = time.perf_counter()
    metrics = run.path("metrics.jsonl")
    try:
        res = train_pipeline(cfg, log_path=metrics)
    except DivergenceError as exc:
        summary = {"status": "diverged", "message": str(exc), "config": cfg.to_dict()}
        run.path("summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        run.finish("diverged", seconds=time.perf_counter() - t0)
        raise
    save_model(res.model, run.path("model"))
    write_csv(run.path("calibration.csv"), ["layer", "step_size", "act_bits", "rate", "reachable"],
              [[r["layer"], repr(r["step_size"]), r["act_bits"], r["rate"], r["reachable"]]
               for r in res.calibration])
    if res.schedule:
        write_csv(run.path("schedule.csv"), ["layer", "carry_std", "acc", "drop", "mode"],
                  [[p["layer"], p["carry_std"], p["acc"], p["drop"], p["mode"]] for p in res.schedule])
    summary = {"status": "ok", "config": cfg.to_dict(), **res.summary}
    run.path("summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    run.finish(seconds=time.perf_counter() - t0)
    print(json.dumps({k: v for k, v in res.summary.items() if k.startswith("acc")}, sort_keys=True))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .netgraph import calibrate_model, load_model, save_model
    model = load_model(args.model)
    seed, source = resolve_seed(args.seed)
    x, _ = select_data(args, model, "train")
    x = x[:args.samples]
    bits = args.bits or model.acc_bits
    run = Run(args, {"model": args.model, "p_target": args.p, "bits": bits, "shared": args.shared,
                     "samples": len(x), "seed": seed, "seed_source": source})
    new, rows = calibrate_model(model, x, args.p, bits, shared=args.shared)
    write_csv(run.path("calibration.csv"),
              ["layer", "step_size", "act_bits", "rate", "reachable", "iterations"],
              [[r["layer"], repr(r["step_size"]), r["act_bits"], r["rate"], r["reachable"],
                r["iterations"]] for r in rows])
    for r in rows:
        print(f"{r['layer']}: step={r['step_size']:.6g} act_bits={r['act_bits']} "
              f"rate={100 * r['rate']:.2f}%{'' if r['reachable'] else '  UNREACHABLE'}")
    bad = [r for r in rows if not r["reachable"]]
    if bad:
        run.finish("unreachable")
        raise CalibrationUnreachable(
            "overflow target %.2f%% unreachable for: %s" % (
                args.p, ", ".join(f"{r['layer']} (best {100 * r['rate']:.2f}% at "
                                  f"{r['act_bits']} activation bits)" for r in bad)))
    save_model(new, run.path("model"))
    run.finish()
    return EXIT_OK


def cmd_infer(args) -> int:
    from .kernels import AccMode
    from .netgraph import forward, load_model
    mode = AccMode.parse(args.acc_mode)
    model = load_model(args.model)
    x, y = select_data(args, model, "test")
    run = Run(args, {"model": args.model, "acc_mode": str(mode), "threads": args.threads,
                     "data": args.data or f"synthetic:{args.split or 'test'}", "samples": len(x)})
    logits = np.asarray(forward(model, x, mode, threads=args.threads))
    pred = np.argmax(logits, axis=1)
    write_csv(run.path("logits.csv"), ["sample"] + [f"logit_{j}" for j in range(logits.shape[1])] + ["pred"],
              [[i, *map(repr, row.tolist()), int(p)] for i, (row, p) in enumerate(zip(logits, pred))])
    extra = {}
    if y is not None:
        extra["accuracy"] = float(np.mean(pred == y))
        print(f"accuracy ({mode}): {100 * extra['accuracy']:.2f}%")
    run.finish(**extra)
    return EXIT_OK


def parse_shape(text: str):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError([f"--shape {text!r}: expected MxKxN with positive sizes"])
    return dims


def cmd_bench(args) -> int:
    from .kernels import AccMode, available_backends
    from .kernels.bench import BASELINE, PRESETS, bench_gemm, speedup_table, write_csv as bench_csv
    from .kernels.bench import write_jsonl
    problems = [f"--preset {p!r}: unknown (choose from {sorted(PRESETS)})"
                for p in args.preset or [] if p not in PRESETS]
    if problems:
        raise ConfigError(problems)
    shapes = [(p, PRESETS[p]) for p in args.preset or []]
    shapes += [(s, parse_shape(s)) for s in args.shape or []]
    if not shapes:
        shapes = list(PRESETS.items())
    # commas inside parentheses belong to the mode, e.g. packed_isolated(8,64)
    modes = [str(AccMode.parse(m.strip())) for m in re.split(r",(?![^()]*\))", args.modes) if m.strip()]
    if str(BASELINE) not in modes:
        modes.insert(0, str(BASELINE))
    if args.backend == "both":
        backends = available_backends()
    else:
        backends = [args.backend] if args.backend else [None]
    seed, source = resolve_seed(args.seed)
    run = Run(args, {"shapes": [n for n, _ in shapes], "modes": modes, "reps": args.reps,
                     "warmup": args.warmup, "backends": backends, "threads": args.threads,
                     "seed": seed, "seed_source": source, "schema": CSV_SCHEMA})
    records = []
    for name, shape in shapes:
        for be in backends:
            for m in modes:
                rec = bench_gemm(shape, m, args.reps, args.warmup, seed, be, args.threads)
                log.info("%s %s %s median %.3f ms", name, rec.backend, m, rec.median_ns / 1e6)
                records.append(rec)
    if args.format in ("csv", "both"):
        bench_csv(run.path("bench.csv"), records)
    if args.format in ("jsonl", "both"):
        write_jsonl(run.path("bench.jsonl"), records)
    table = speedup_table(records)
    write_csv(run.path("ratios.csv"), ["shape", "backend", "mode", "baseline", "ratio"],
              [[r["shape"], r["backend"], r["mode"], r["baseline"], f"{r['ratio']:.4f}"] for r in table])
    width = max(len(r["shape"]) for r in table) if table else 5
    print(f"{'shape':<{width}}  {'backend':<7}  {'mode':<26}  ratio vs {BASELINE}")
    for r in table:
        print(f"{r['shape']:<{width}}  {r['backend']:<7}  {r['mode']:<26}  {r['ratio']:.2f}x")
    run.finish()
    return EXIT_OK


def carry_rows(model, x):
    """One CSV row per neuron plus per-layer and overall (mean, std) summaries."""
    from .netgraph import carry_counts
    rows, layers, means, stds = [], {}, [], []
    for name, n in carry_counts(model, x).items():
        mean, var = n.mean(axis=0), n.var(axis=0)
        rows += [[j, name, float(mean[j]), float(var[j])] for j in range(n.shape[1])]
        layers[name] = {"mean": float(mean.mean()), "std": float(np.sqrt(var).mean())}
        means.append(mean)
        stds.append(np.sqrt(var))
    overall = {"mean": float(np.concatenate(means).mean()) if means else 0.0,
               "std": float(np.concatenate(stds).mean()) if stds else 0.0}
    return rows, {"layers": layers, "overall": overall}


def cmd_carry_sim(args) -> int:
    from .errors import RangeError
    from .netgraph import load_model
    model = load_model(args.model)
    x, _ = select_data(args, model, "test")
    run = Run(args, {"model": args.model, "baseline": args.baseline, "samples": len(x),
                     "data": args.data or f"synthetic:{args.split or 'test'}"})
    try:
        rows, summary = carry_rows(model, x)
    except RangeError as exc:
        raise ConfigError([f"carry-sim: unsupported weights ({exc})"]) from None
    write_csv(run.path("carries.csv"), ["neuron_id", "layer", "mean", "var"], rows)
    print(f"{'model':<10} {'carry':>10} {'carry std':>10}")
    print(f"{'this':<10} {summary['overall']['mean']:>10.3f} {summary['overall']['std']:>10.3f}")
    if args.baseline:
        base = load_model(args.baseline)
        _, bsum = carry_rows(base, x)
        summary["baseline"] = bsum
        ratio = summary["overall"]["std"] / bsum["overall"]["std"] if bsum["overall"]["std"] else math.nan
        summary["std_ratio"] = ratio
        print(f"{'baseline':<10} {bsum['overall']['mean']:>10.3f} {bsum['overall']['std']:>10.3f}")
        print(f"std ratio this/baseline: {ratio:.3f}")
    run.path("carry_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    run.finish()
    return EXIT_OK


REPORT_COLUMNS = ["run", "slope", "p_target", "lambda_overflow", "lambda_carry", "acc_bits",
                  "acc_exact", "acc_wrapped", "acc_packed", "overflow_rate", "carry_std", "status"]


def report_row(run_dir: Path) -> dict:
    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    cfg = summary.get("config", {})
    row = {"run": run_dir.name, "status": summary.get("status", "ok")}
    for k in ("slope", "p_target", "lambda_overflow", "lambda_carry", "acc_bits"):
        row[k] = cfg.get(k, "")
    for k in ("acc_exact", "acc_wrapped", "acc_packed", "overflow_rate", "carry_std"):
        v = summary.get(k)
        row[k] = "" if v is None else f"{100 * v:.2f}" if k.startswith("acc") else f"{v:.4g}"
    if row["status"] == "diverged":
        row["acc_exact"] = row["acc_wrapped"] = "diverged"
    return row


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.runs]
    rows = [report_row(d) for d in dirs]
    run = Run(args, {"runs": [str(d) for d in dirs]})
    write_csv(run.path("report.csv"), REPORT_COLUMNS, [[r[c] for c in REPORT_COLUMNS] for r in rows])
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    lines += ["| " + " | ".join(str(r[c]) for c in REPORT_COLUMNS) + " |" for r in rows]
    text = "\n".join(lines) + "\n"
    run.path("report.md").write_text(text, encoding="utf-8")
    print(text, end="")
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--out", default="wrapnet-out", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help=f"random seed (fallback: ${SEED_ENV}, then 0)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--model", required=True, help="model directory or manifest.json")
    data.add_argument("--data", help="inputs as .npy or CSV (default: the model's synthetic split)")
    data.add_argument("--split", choices=["train", "val", "test"])

    p = argparse.ArgumentParser(prog="wrapnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"wrapnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="run the training pipeline")
    for name, typ in TRAIN_FLAGS.items():
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    t.add_argument("--epochs", action="append", metavar="STAGE=N", help="epochs for one stage")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config field")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", parents=[common, data], help="re-derive activation step sizes")
    c.add_argument("--p", type=float, default=5.0, help="target overflow rate in percent")
    c.add_argument("--bits", type=int, help="accumulator bits (default: the model's)")
    c.add_argument("--shared", action="store_true", help="one step size for all layers")
    c.add_argument("--samples", type=int, default=2000)
    c.set_defaults(func=cmd_calibrate)

    i = sub.add_parser("infer", parents=[common, data], help="integer forward pass, logits as CSV")
    i.add_argument("--acc-mode", default="exact32", help="e.g. exact32, wrapped(8), packed_isolated(8,64)")
    i.add_argument("--threads", type=int, default=1)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", parents=[common], help="time GEMM kernels")
    b.add_argument("--preset", action="append", help="named layer shape (repeatable)")
    b.add_argument("--shape", action="append", help="MxKxN (repeatable)")
    b.add_argument("--modes", default="wrapped(32),packed_isolated(8,64)",
                   help="comma-separated accumulator modes")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--backend", choices=["cython", "numpy", "both"])
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--format", choices=["csv", "jsonl", "both"], default="csv")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("carry-sim", parents=[common, data], help="per-neuron carry statistics")
    s.add_argument("--baseline", help="second model to compare carry spread against")
    s.set_defaults(func=cmd_carry_sim)

    r = sub.add_parser("report", parents=[common], help="tabulate training runs")
    r.add_argument("runs", nargs="+", help="output directories of train runs")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ManifestVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, CalibrationError, CalibrationUnreachable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (WrapnetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
