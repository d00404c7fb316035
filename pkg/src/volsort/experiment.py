"""Seeded multi-split experiment runner shared by the CLI and the tests."""

from __future__ import annotations

import copy
import csv
import datetime as _dt
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from . import baseline_qr, vsps
from .cnf import fit_flow, save_flow
from .data import (
    PAPER_FRACTIONS,
    ConfigurationError,
    Dataset,
    apply_stats,
    fit_stats,
    generate_synthetic,
    load_csv,
    split,
)
from .metrics import MetricsReport, conditional_coverage_from_flags, make_grid
from .nn_core import TrainConfig

logger = logging.getLogger(__name__)

METHODS = ("vsps", "naive_qr")
OUTPUT_ENV = "VSPS_OUTPUT_DIR"

DEFAULT_CONFIG: Dict[str, Any] = {
    "data": {"source": "synthetic", "n": 5000, "seed": 0, "path": None, "d": 2},
    "fractions": list(PAPER_FRACTIONS),
    "alpha": 0.1,
    "M": 50,
    "seeds": list(range(10)),
    "methods": list(METHODS),
    "flow": {"blocks": 5, "hidden_sizes": [64, 64, 64]},
    "qr": {"hidden_sizes": [64, 64, 64]},
    "train": {"batch_size": 256, "max_epochs": 1000, "patience": 20, "lr": 1e-3},
    "grid": {"points_per_dim": None, "mc_probes": 200_000, "margin": 0.1},
    "k_selection_uses_calibration_set": False,
    "save_models": True,
    "workers": 1,
    "output_dir": "runs/latest",
}


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigurationError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def set_dotted(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigurationError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, overrides: Optional[dict] = None) -> "ExperimentConfig":
        cfg = cls(_merge(DEFAULT_CONFIG, overrides or {}))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"malformed config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        return cls.from_dict(loaded)

    def __getitem__(self, key):
        return self.raw[key]

    def validate(self) -> None:
        r = self.raw
        if not 0.0 < float(r["alpha"]) < 1.0:
            raise ConfigurationError(f"alpha must be in (0, 1), got {r['alpha']}")
        if not r["seeds"]:
            raise ConfigurationError("need at least one seed")
        if not r["methods"]:
            raise ConfigurationError("need at least one method")
        bad = set(r["methods"]) - set(METHODS)
        if bad:
            raise ConfigurationError(f"unknown methods {sorted(bad)}; choose from {list(METHODS)}")
        if int(r["M"]) < 1:
            raise ConfigurationError("M must be >= 1")
        if r["data"]["source"] not in ("synthetic", "csv"):
            raise ConfigurationError("data.source must be 'synthetic' or 'csv'")
        if r["data"]["source"] == "csv" and not r["data"]["path"]:
            raise ConfigurationError("data.path is required for csv data")
        try:
            self.train_config(0)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    def train_config(self, seed: int) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(int(t["batch_size"]), int(t["max_epochs"]), int(t["patience"]), float(t["lr"]), seed)


def derive_seed(seed: int, tag: str) -> int:
    tags = {"split": 0, "flow": 1, "flow_shuffle": 2, "qr": 3, "sampling": 4}
    return int(np.random.SeedSequence([int(seed) % 2**64, tags[tag]]).generate_state(1, np.uint64)[0])


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg["data"]
    if d["source"] == "synthetic":
        return generate_synthetic(int(d["n"]), int(d["seed"]))
    return load_csv(d["path"], int(d["d"]))


def run_seed(cfg: ExperimentConfig, dataset: Dataset, seed: int, outdir: Optional[Path] = None) -> dict:
    alpha, M = float(cfg["alpha"]), int(cfg["M"])
    sp = split(dataset, cfg["fractions"], derive_seed(seed, "split"))
    stats = fit_stats(dataset, sp.train)
    z = apply_stats(dataset, stats)
    tr, ca, va, te = (z.subset(i) for i in sp.as_tuple())
    g = cfg["grid"]
    grid = make_grid(np.vstack([tr.Y, ca.Y]), g["points_per_dim"], int(g["mc_probes"]), float(g["margin"]),
                     seed=derive_seed(seed, "sampling"))
    result: Dict[str, Any] = {
        "seed": int(seed),
        "split_sizes": [len(i) for i in sp.as_tuple()],
        "grid": grid.descriptor(),
        "methods": {},
    }
    exports: List[dict] = []
    sample_seed = derive_seed(seed, "sampling")

    if "vsps" in cfg["methods"]:
        flow, hist = fit_flow((tr.X, tr.Y), (va.X, va.Y), cfg["flow"]["hidden_sizes"], int(cfg["flow"]["blocks"]),
                              cfg.train_config(derive_seed(seed, "flow_shuffle")), seed=derive_seed(seed, "flow"))
        if outdir is not None and cfg["save_models"]:
            save_flow(flow, outdir / f"flow_seed{seed}.npz")
        if cfg["k_selection_uses_calibration_set"]:
            X_size, X_sel, Y_sel = va.X, ca.X, ca.Y
            sel_stream = vsps.STREAM_CALIBRATION
        else:
            half = len(va.Y) // 2
            if half == 0:
                raise ConfigurationError("validation split too small to halve for K selection")
            X_sel, Y_sel, X_size = va.X[:half], va.Y[:half], va.X[half:]
            sel_stream = vsps.STREAM_SELECTION
        sel = vsps.select_k(flow, X_size, X_sel, Y_sel, alpha, M, grid, sample_seed, sel_stream=sel_stream)
        cal = vsps.calibrate(flow, sel.k_star, ca.X, ca.Y, alpha, M, sample_seed)
        regions = vsps.predict_regions(te.X, flow, sel.k_star, cal.gamma, M, sample_seed)
        logger.info("seed %d vsps: K*=%d gamma=%.5f", seed, sel.k_star, cal.gamma)
        result["methods"]["vsps"] = _evaluate(regions, te, grid)
        result["methods"]["vsps"].update(
            k_star=int(sel.k_star), gamma=float(cal.gamma),
            flow_epochs=len(hist), flow_best_val_nll=float(hist.best_val),
        )
        exports += _exports("vsps", regions, te)

    if "naive_qr" in cfg["methods"]:
        qr = baseline_qr.train_naive_qr((tr.X, tr.Y), (va.X, va.Y), alpha,
                                        cfg.train_config(derive_seed(seed, "qr")),
                                        cfg["qr"]["hidden_sizes"], seed=derive_seed(seed, "qr"))
        gamma_qr = baseline_qr.conformalize_qr(qr, ca.X, ca.Y, alpha)
        boxes = baseline_qr.qr_regions(te.X, qr, gamma_qr)
        logger.info("seed %d naive_qr: gamma=%.5f", seed, gamma_qr)
        result["methods"]["naive_qr"] = _evaluate(boxes, te, grid)
        result["methods"]["naive_qr"]["gamma"] = float(gamma_qr)
        exports += _exports("naive_qr", boxes, te)

    result["regions"] = exports
    return result


def _evaluate(regions, te: Dataset, grid) -> dict:
    covered = np.array([r.contains(y) for r, y in zip(regions, te.Y)], dtype=float)
    vols = np.array([r.volume(grid) for r in regions], dtype=float)
    size = vols[:, 0].mean() if grid.kind == "grid" else vols[:, 1].mean()
    out = {
        "coverage": float(covered.mean()),
        "size": float(size),
        "volume": float(vols[:, 1].mean()),
        "cond_coverage": None,
        "group_coverage": None,
        "grid_token": grid.token(),
    }
    if te.groups is not None:
        per, worst = conditional_coverage_from_flags(covered, te.groups)
        out["cond_coverage"] = worst
        out["group_coverage"] = {str(k): v for k, v in per.items()}
    return out


def _exports(method: str, regions, te: Dataset) -> List[dict]:
    rows = []
    for i, (r, y) in enumerate(zip(regions, te.Y)):
        rec = r.export(i)
        rec["method"] = method
        rec["covered"] = bool(r.contains(y))
        rec["y"] = [float(v) for v in y]
        rows.append(rec)
    return rows


def _seed_worker(args):
    raw, seed, outdir = args
    cfg = ExperimentConfig(raw)
    return run_seed(cfg, load_dataset(cfg), seed, outdir)


def run_experiment(cfg: ExperimentConfig, outdir=None) -> dict:
    """Run every seed, write report.json, metrics.csv and regions.csv; return the report."""
    start = time.time()
    outdir = Path(outdir or os.environ.get(OUTPUT_ENV) or cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg)
    seeds = [int(s) for s in cfg["seeds"]]
    workers = max(1, int(cfg["workers"]))
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_seed_worker, [(cfg.raw, s, outdir) for s in seeds]))
    else:
        results = []
        for s in seeds:
            logger.info("seed %d: start", s)
            results.append(run_seed(cfg, dataset, s, outdir))

    report = build_report(cfg, results)
    report["run_info"] = {
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "runtime_seconds": round(time.time() - start, 3),
    }
    write_artifacts(report, results, outdir)
    return report


def build_report(cfg: ExperimentConfig, results: List[dict]) -> dict:
    metrics = MetricsReport()
    for res in results:
        for method in cfg["methods"]:
            m = res["methods"][method]
            metrics.add(method, res["seed"], {
                "coverage": m["coverage"], "size": m["size"], "cond_coverage": m["cond_coverage"],
            })
    per_seed = [{k: v for k, v in r.items() if k != "regions"} for r in results]
    return {
        "config": cfg.raw,
        "per_seed": per_seed,
        "aggregates": metrics.aggregates(),
        "grids": {str(r["seed"]): r["grid"] for r in results},
        "k_star": {str(r["seed"]): r["methods"]["vsps"]["k_star"] for r in results if "vsps" in r["methods"]},
        "gamma": {
            method: {str(r["seed"]): r["methods"][method]["gamma"] for r in results}
            for method in cfg["methods"]
        },
        "table": metrics.table(),
    }


def write_artifacts(report: dict, results: List[dict], outdir: Path) -> None:
    with open(outdir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(outdir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "method", "metric", "value"])
        for r in results:
            for method, m in r["methods"].items():
                for key in ("coverage", "size", "cond_coverage"):
                    if m.get(key) is not None:
                        w.writerow([r["seed"], method, key, repr(m[key])])
    emit_plot_data(results, outdir / "regions.csv")


def emit_plot_data(results: List[dict], path) -> None:
    """One row per (seed, test point, method) with ground truth and region geometry."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "test_index", "method", "covered", "y", "geometry"])
        for r in results:
            for rec in r["regions"]:
                if rec["method"] == "vsps":
                    gamma = rec["gamma"]
                    geom = {"K": rec["K"], "gamma": gamma if math.isfinite(gamma) else "inf",
                            "centers": rec["centers"]}
                else:
                    geom = {"lower": rec["lower"], "upper": rec["upper"]}
                w.writerow([r["seed"], rec["test_index"], rec["method"], int(rec["covered"]),
                            json.dumps(rec["y"]), json.dumps(geom)])
