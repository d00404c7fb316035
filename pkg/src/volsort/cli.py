"""Command line entry point: ``volsort {run,synthetic,inspect-flow,check}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .data import ConfigurationError, IngestionError, generate_synthetic, write_csv
from .experiment import OUTPUT_ENV, ExperimentConfig, run_experiment, set_dotted

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("volsort")


def _parse_kv(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def _overrides(extra):
    """Turn leftover ``--a.b value`` / ``--a.b=value`` tokens into (key, value) pairs."""
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigurationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigurationError(f"missing value for {tok}")
            i += 1
            val = extra[i]
        pairs.append((key, yaml.safe_load(val)))
        i += 1
    return pairs


def build_config(args, extra) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.from_dict()
    raw = cfg.raw
    if args.synthetic is not None:
        kv = _parse_kv(args.synthetic)
        raw["data"]["source"] = "synthetic"
        for k, v in kv.items():
            set_dotted(raw, f"data.{k}", v)
    if args.csv:
        raw["data"]["source"] = "csv"
        raw["data"]["path"] = args.csv
    if args.methods:
        raw["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.seeds:
        raw["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
    for key, val in _overrides(extra):
        set_dotted(raw, key, val)
    if args.output:
        raw["output_dir"] = args.output
    cfg = ExperimentConfig(raw)
    cfg.validate()
    return cfg


def _setup_logging(outdir: Path, verbose: bool):
    root = logging.getLogger("volsort")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s")
    handlers = [logging.StreamHandler(sys.stderr), logging.FileHandler(outdir / "run.log", mode="w")]
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)
    return handlers


def cmd_run(args, extra) -> int:
    try:
        cfg = build_config(args, extra)
    except (ConfigurationError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(os.environ.get(OUTPUT_ENV) or cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    handlers = _setup_logging(outdir, args.verbose)
    try:
        report = run_experiment(cfg, outdir)
    except (ConfigurationError, IngestionError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # any seed failure aborts the run
        log.error("run failed: %s", exc, exc_info=True)
        return EXIT_RUNTIME
    finally:
        root = logging.getLogger("volsort")
        for h in handlers:
            root.removeHandler(h)
            h.close()
    print(report["table"])
    print(f"artifacts written to {outdir}")
    return EXIT_OK


def cmd_synthetic(args, extra) -> int:
    try:
        kv = _parse_kv(args.params)
        ds = generate_synthetic(int(kv.get("n", 5000)), int(kv.get("seed", 0)))
    except (ConfigurationError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_csv(ds, args.out)
    print(f"wrote {ds.n} rows to {args.out}")
    return EXIT_OK


def cmd_inspect_flow(args, extra) -> int:
    from .checks import flow_diagnostics
    from .cnf import load_flow

    try:
        model = load_flow(args.model)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot load {args.model}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    diag = flow_diagnostics(model, n_probes=args.probes, seed=args.seed)
    print(json.dumps({"metadata": model.metadata(), **diag}, indent=2))
    return EXIT_OK


def cmd_check(args, extra) -> int:
    from .checks import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volsort", description="Volume-sorted conformal prediction regions")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a seeded multi-split experiment",
                       epilog="Any config key can be overridden with --dotted.key VALUE, e.g. --flow.blocks 3")
    r.add_argument("--config", help="YAML config file")
    r.add_argument("--synthetic", nargs="*", metavar="KEY=VALUE", help="use synthetic data, e.g. n=2000 seed=1")
    r.add_argument("--csv", help="CSV dataset path (x0..,y0.. header)")
    r.add_argument("--methods", help="comma separated subset of vsps,naive_qr")
    r.add_argument("--seeds", help="comma separated split seeds")
    r.add_argument("--output", help=f"output directory (env {OUTPUT_ENV} takes precedence)")
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synthetic", help="write a synthetic v-shape dataset as CSV")
    s.add_argument("params", nargs="*", metavar="KEY=VALUE", help="n=5000 seed=0")
    s.add_argument("-o", "--out", default="synthetic.csv")
    s.set_defaults(func=cmd_synthetic)

    f = sub.add_parser("inspect-flow", help="round-trip and log-det diagnostics for a saved flow")
    f.add_argument("model")
    f.add_argument("--probes", type=int, default=200)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_inspect_flow)

    c = sub.add_parser("check", help="run the built-in invariant and oracle checks")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command != "run":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    return args.func(args, extra)


if __name__ == "__main__":
    sys.exit(main())
