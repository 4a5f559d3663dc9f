import json
import math

import numpy as np
import pytest

from deepfbsde import config as cfgmod
from deepfbsde.cli import main
from deepfbsde.instruments import call_spread_combo
from deepfbsde.oracles import lognormal_quadrature_price

SMALL = ["--override", "model.steps=5", "--override", "training.batch=64",
         "--override", "networks.hidden=[4, 4]", "--override", "oracle.mc_paths=10000",
         "--override", "oracle.substeps=20", "--override", "training.eval_paths=2048"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def table(out):
    rows = []
    for line in out.splitlines()[1:]:
        parts = line.split()
        rows.append((float(parts[0]), float(parts[1]), float(parts[2]), parts[-1]))
    return rows


def test_presets_listing(capsys):
    code, out, _ = run(capsys, "presets")
    assert code == 0
    assert [line.split()[0] for line in out.splitlines()] == list(cfgmod.PRESETS)


def test_oracle_table_matches_quadrature(capsys):
    code, out, _ = run(capsys, "oracle", "--preset", "fwd-random-eu")
    assert code == 0
    rows = table(out)
    assert [r[0] for r in rows] == [70.0 + 10 * k for k in range(11)]
    for x, price, _, method in rows:
        q = lognormal_quadrature_price(call_spread_combo(), x, 0.06, 0.2, 0.5, kinks=(120.0, 150.0))
        assert method == "closed_form"
        assert price == pytest.approx(q, abs=1e-6)


def test_oracle_small_vol_row(capsys):
    code, out, _ = run(capsys, "oracle", "--preset", "fwd-fixed-eu", "--override", "model.vol=1e-9",
                       "--override", "instrument.payoff={kind: call, strike: 120}", "--x", "100", "130")
    assert code == 0
    rows = table(out)
    assert rows[0][1] == pytest.approx(0.0, abs=1e-6)
    assert rows[1][1] == pytest.approx(130.0 - 120.0 * math.exp(-0.03), abs=1e-6)


def test_oracle_barrier_has_standard_error(capsys):
    code, out, _ = run(capsys, "oracle", "--preset", "barrier-bridge", "--override", "oracle.mc_paths=10000",
                       "--override", "oracle.substeps=20")
    assert code == 0
    line = out.splitlines()[1].split()
    assert float(line[3]) > 0 and line[-1] == "mc_continuous"


def test_config_error_exit(capsys):
    code, _, err = run(capsys, "run", "--preset", "fwd-fixed-eu", "--override", "model.vol=-1",
                       "--override", "training.typo=1")
    assert code == 2
    assert "model.vol" in err and "training.typo: unknown key" in err


def test_needs_a_configuration(capsys):
    code, _, err = run(capsys, "run")
    assert code == 2 and "--preset" in err


def test_dry_run_and_report(tmp_path, capsys):
    out_dir = tmp_path / "dry"
    code, out, _ = run(capsys, "run", "--preset", "fwd-fixed-eu", "--iterations", "0", "--quiet",
                       "--deterministic", "--out-dir", str(out_dir), *SMALL)
    assert code == 0 and "untrained" in out
    for name in ("config.yaml", "report.csv", "summary.json", "checkpoint.bin", "plot.svg"):
        assert (out_dir / name).exists()
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["untrained"] and "elapsed_s" not in summary
    assert (out_dir / "report.csv").read_text().count("\n") == 2
    assert (out_dir / "plot.svg").read_text().startswith("<svg")

    code, out, _ = run(capsys, "report", str(out_dir))
    assert code == 0 and "check price: FAIL" in out
    code, _, _ = run(capsys, "report", str(out_dir), "--check")
    assert code == 4
    code, out, _ = run(capsys, "report", str(out_dir), "--json")
    assert json.loads(out) == summary


def test_report_lists_missing_artifacts(tmp_path, capsys):
    (tmp_path / "config.yaml").write_text("{}\n")
    code, _, err = run(capsys, "report", str(tmp_path))
    assert code == 2
    assert "report.csv" in err and "summary.json" in err and "config.yaml" not in err


def test_run_directory_is_self_describing(tmp_path, capsys):
    out_dir = tmp_path / "r"
    run(capsys, "run", "--preset", "bwd-fixed-eu", "--iterations", "3", "--quiet", "--deterministic",
        "--out-dir", str(out_dir), *SMALL)
    code, _, _ = run(capsys, "run", "--config", str(out_dir / "config.yaml"), "--quiet",
                     "--out-dir", str(tmp_path / "again"))
    assert code == 0
    assert (out_dir / "report.csv").read_bytes() == (tmp_path / "again" / "report.csv").read_bytes()


def test_deterministic_runs_are_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "run", "--preset", "fwd-random-eu", "--iterations", "20", "--seed", "7",
                         "--quiet", "--deterministic", "--out-dir", str(tmp_path / name), *SMALL)
        assert code == 0
    for artifact in ("report.csv", "summary.json", "checkpoint.bin", "plot.svg"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_divergence_exit(tmp_path, capsys):
    code, _, err = run(capsys, "run", "--preset", "fwd-fixed-eu", "--iterations", "50", "--quiet",
                       "--override", "optimizer.kind=sgd", "--override", "optimizer.lr=1e3",
                       "--out-dir", str(tmp_path), *SMALL)
    assert code == 3
    assert "diverged" in err and (tmp_path / "checkpoint_last_good.bin").exists()


def test_report_columns(tmp_path, capsys):
    run(capsys, "run", "--preset", "fwd-fixed-eu", "--iterations", "10", "--quiet", "--deterministic",
        "--override", "training.val_every=5", "--out-dir", str(tmp_path), *SMALL)
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "iter,train_loss,val_loss,price,delta,elapsed_s"
    iters = [int(line.split(",")[0]) for line in lines[1:]]
    assert iters == list(range(11))
    vals = [line.split(",")[2] for line in lines[1:]]
    assert [k for k, v in enumerate(vals) if v] == [0, 5, 10]
    assert np.isfinite([float(line.split(",")[3]) for line in lines[1:]]).all()
