import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from volsort.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from volsort.experiment import OUTPUT_ENV

FAST = ["--train.max_epochs", "3", "--train.patience", "2", "--flow.blocks", "1", "--flow.hidden_sizes", "[8]",
        "--qr.hidden_sizes", "[8]", "--M", "5"]


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    code = main(["run", "--synthetic", "n=2000", "seed=0", "--seeds", "0", "--output", str(out)])
    return code, out


def test_smoke_run_coverage(smoke_run):
    code, out = smoke_run
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    for method in ("vsps", "naive_qr"):
        assert 0.8 <= report["aggregates"][method]["coverage"]["mean"] <= 1.0
    for key in ("config", "per_seed", "aggregates", "grids", "k_star", "gamma", "run_info"):
        assert key in report
    assert "runtime_seconds" in report["run_info"]
    tokens = {m["grid_token"] for m in report["per_seed"][0]["methods"].values()}
    assert len(tokens) == 1
    assert (out / "flow_seed0.npz").exists()


def test_regions_csv_matches_report(smoke_run):
    _, out = smoke_run
    report = json.loads((out / "report.json").read_text())
    with open(out / "regions.csv") as fh:
        rows = list(csv.DictReader(fh))
    k_star = report["k_star"]["0"]
    for method in ("vsps", "naive_qr"):
        mine = [r for r in rows if r["method"] == method]
        cov = np.mean([int(r["covered"]) for r in mine])
        assert cov == report["per_seed"][0]["methods"][method]["coverage"]
        geom = json.loads(mine[0]["geometry"])
        if method == "vsps":
            assert len(geom["centers"]) == k_star
        else:
            assert len(geom["lower"]) + len(geom["upper"]) == 4


def test_metrics_csv_rows(smoke_run):
    _, out = smoke_run
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 3
    assert {r["metric"] for r in rows} == {"coverage", "size", "cond_coverage"}


def test_qr_only_trains_no_flow(tmp_path):
    code = main(["run", "--synthetic", "n=400", "--seeds", "0", "--methods", "naive_qr",
                 "--output", str(tmp_path), *FAST])
    assert code == EXIT_OK
    log = (tmp_path / "run.log").read_text()
    assert "naive_qr" in log and "training flow" not in log
    assert not list(tmp_path.glob("flow_seed*.npz"))


def test_config_file_with_dotted_override(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("data:\n  n: 300\nseeds: [4]\nmethods: [naive_qr]\nalpha: 0.2\n")
    code = main(["run", "--config", str(cfg), "--alpha", "0.3", "--output", str(tmp_path / "o"), *FAST])
    assert code == EXIT_OK
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["config"]["alpha"] == 0.3 and report["config"]["data"]["n"] == 300
    assert list(report["gamma"]["naive_qr"]) == ["4"]


def test_env_var_sets_output(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    code = main(["run", "--synthetic", "n=300", "--seeds", "1", "--methods", "naive_qr",
                 "--output", str(tmp_path / "flag"), *FAST])
    assert code == EXIT_OK
    assert (tmp_path / "env" / "report.json").exists()
    assert not (tmp_path / "flag").exists()


def test_config_errors_exit_one(tmp_path, capsys):
    assert main(["run", "--alpha", "1.5", "--output", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--no.such.key", "1", "--output", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--methods", "bogus", "--output", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--csv", str(tmp_path / "missing.csv"), "--output", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_training_failure_exits_two(tmp_path):
    code = main(["run", "--synthetic", "n=300", "--seeds", "0", "--methods", "naive_qr",
                 "--train.lr", "1e300", "--output", str(tmp_path), *FAST])
    assert code == EXIT_RUNTIME
    assert "run failed" in (tmp_path / "run.log").read_text()


def test_synthetic_then_csv_run(tmp_path):
    data = tmp_path / "s.csv"
    assert main(["synthetic", "n=250", "seed=2", "-o", str(data)]) == EXIT_OK
    assert data.read_text().splitlines()[0] == "x0,y0,y1"
    code = main(["run", "--csv", str(data), "--seeds", "0", "--methods", "vsps",
                 "--output", str(tmp_path / "o"), *FAST])
    assert code == EXIT_OK


def test_inspect_flow(tmp_path, capsys):
    main(["run", "--synthetic", "n=300", "--seeds", "0", "--methods", "vsps",
          "--output", str(tmp_path), *FAST])
    capsys.readouterr()
    assert main(["inspect-flow", str(tmp_path / "flow_seed0.npz"), "--probes", "50"]) == EXIT_OK
    diag = json.loads(capsys.readouterr().out)
    assert diag["roundtrip_y_max_abs"] <= 1e-6
    assert diag["metadata"]["d"] == 2
    assert main(["inspect-flow", str(tmp_path / "nope.npz")]) == EXIT_CONFIG


def test_check_subcommand(capsys):
    assert main(["check"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("[PASS]") >= 7


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "volsort", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "inspect-flow" in res.stdout


def test_parallel_workers_match_serial(tmp_path):
    reports = []
    for w in (1, 2):
        out = tmp_path / f"w{w}"
        assert main(["run", "--synthetic", "n=400", "--seeds", "0,1", "--workers", str(w),
                     "--output", str(out), *FAST]) == EXIT_OK
        rep = json.loads((out / "report.json").read_text())
        reports.append((rep["per_seed"], rep["aggregates"], (out / "regions.csv").read_bytes()))
    assert reports[0] == reports[1]
