import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from hgts.cli import CONFIG_DIR, main
from hgts.model import ModelConfig

TINY = ModelConfig(
    n_layers=1, d_model=16, d_ff=32, n_heads=2, patch_len=12, lookback=48, edge_num=4,
    epochs=2, lr=1e-3, batch_size=16, max_train_windows=64,
)


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY.to_text())
    return str(path)


@pytest.fixture
def trained(tmp_path, tiny_cfg, toy_csv):
    out = str(tmp_path / "run")
    assert main(["train", "--config", tiny_cfg, "--data", toy_csv, "--out", out, "--seed", "1"]) == 0
    return out


def test_train_outputs_and_manifest(trained, capsys):
    for name in ("best.ckpt", "best.ckpt.cfg", "metrics.csv", "loss_curve.svg", "manifest.txt"):
        assert os.path.exists(os.path.join(trained, name))
    manifest = open(os.path.join(trained, "manifest.txt")).read()
    assert "status = ok" in manifest and "seed = 1" in manifest and "[model]" in manifest
    assert open(os.path.join(trained, "loss_curve.svg")).read().startswith("<svg")


def test_same_seed_gives_identical_metrics(tmp_path, tiny_cfg, toy_csv):
    outs = [str(tmp_path / f"r{i}") for i in range(2)]
    for out in outs:
        assert main(["train", "--config", tiny_cfg, "--data", toy_csv, "--out", out, "--seed", "1"]) == 0
    a, b = (open(os.path.join(o, "metrics.csv")).read() for o in outs)
    assert a == b


def test_refuses_to_overwrite_without_force(trained, tiny_cfg, toy_csv):
    args = ["train", "--config", tiny_cfg, "--data", toy_csv, "--out", trained]
    assert main(args) == 2
    assert main(args + ["--force", "--epochs", "1"]) == 0


def test_missing_data_exits_3_after_writing_manifest(tmp_path, tiny_cfg):
    out = tmp_path / "x"
    assert main(["train", "--config", tiny_cfg, "--data", str(tmp_path / "none.csv"), "--out", str(out)]) == 3
    assert "status = running" in (out / "manifest.txt").read_text()


def test_bad_config_exits_2(tmp_path, toy_csv):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nedge_num = 3\n")
    assert main(["train", "--config", str(bad), "--data", toy_csv, "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", "no_such_config", "--data", toy_csv, "--out", str(tmp_path / "o")]) == 2


def test_forecast_table_and_plots(trained, toy_csv, tmp_path):
    out = str(tmp_path / "fc")
    ckpt = os.path.join(trained, "best.ckpt")
    assert main(["forecast", "--ckpt", ckpt, "--data", toy_csv, "--horizons", "12,24", "--out", out, "--plots", "all"]) == 0
    rows = list(csv.reader(open(os.path.join(out, "forecast_metrics.csv"))))
    assert rows[0] == ["horizon", "mse", "mae"] and [r[0] for r in rows[1:]] == ["12", "24", "avg"]
    svgs = [f for f in os.listdir(out) if f.endswith(".svg")]
    assert len(svgs) == 3 * 2  # channels x horizons
    # an imputation-only request on a causal checkpoint is a config error
    assert main(["impute", "--ckpt", ckpt, "--data", toy_csv, "--out", str(tmp_path / "imp")]) == 2


def test_forecast_default_horizons():
    from hgts.cli import build_parser

    args = build_parser().parse_args(["forecast", "--ckpt", "a", "--data", "b", "--out", "c"])
    assert args.horizons == "96,192,336,720"
    args = build_parser().parse_args(["impute", "--ckpt", "a", "--data", "b", "--out", "c"])
    assert args.ratios == "0.125,0.25,0.375,0.5"


def test_impute_command(tmp_path, tiny_cfg, toy_csv):
    run = str(tmp_path / "imp_run")
    assert main(["train", "--config", tiny_cfg, "--data", toy_csv, "--out", run, "--task", "impute", "--epochs", "1"]) == 0
    ckpt = os.path.join(run, "best.ckpt")
    out = str(tmp_path / "imp")
    assert main(["impute", "--ckpt", ckpt, "--data", toy_csv, "--out", out]) == 0
    rows = list(csv.reader(open(os.path.join(out, "impute_metrics.csv"))))
    assert [r[0] for r in rows[1:]] == ["0.125", "0.25", "0.375", "0.5", "avg"]
    mses = [float(r[1]) for r in rows[1:-1]]
    assert abs(float(rows[-1][1]) - np.mean(mses)) < 1e-9
    assert main(["impute", "--ckpt", ckpt, "--data", toy_csv, "--out", out + "0", "--ratios", "0,0.25"]) == 2


def test_inspect_dumps(trained, toy_csv, tmp_path):
    out = tmp_path / "insp"
    ckpt = os.path.join(trained, "best.ckpt")
    assert main(["inspect", "--ckpt", ckpt, "--data", toy_csv, "--out", str(out), "--window-index", "3"]) == 0
    adj = np.loadtxt(out / "block0_intra_adj_s0.csv", delimiter=",", skiprows=1)
    assert adj.shape == (4, 4)  # E x N
    np.testing.assert_array_equal(adj.sum(axis=0), 1)
    inter = np.loadtxt(out / "block0_inter_adj_s0.csv", delimiter=",", skiprows=1)
    assert inter.shape == (3, 12)  # C rows, C*E columns
    assert (out / "block0_intra_conf_s0.svg").exists()
    assert main(["inspect", "--ckpt", ckpt, "--data", toy_csv, "--out", str(out) + "2", "--window-index", "-1"]) == 3


def test_corrupt_checkpoint_exits_5(trained, toy_csv, tmp_path):
    ckpt = os.path.join(trained, "best.ckpt")
    blob = open(ckpt, "rb").read()
    open(ckpt, "wb").write(blob[:-7])
    assert main(["forecast", "--ckpt", ckpt, "--data", toy_csv, "--out", str(tmp_path / "f")]) == 5


def test_verify_oracle_suite_and_thread_cap():
    env = dict(os.environ, HGTS_THREADS="1")
    proc = subprocess.run(
        [sys.executable, "-m", "hgts", "verify", "--suite", "oracle"], capture_output=True, text=True, env=env
    )
    assert proc.returncode == 0, proc.stderr
    summary = json.loads(proc.stdout)
    assert summary["passed"] and all(c["passed"] for c in summary["checks"])


BUNDLED_FORECAST_ROWS = {
    # name: (blocks, d_model, d_ff, heads, patch, edges, lr, batch, epochs)
    "etth1": (2, 1024, 2048, 8, 48, 7, 0.0001, 32, 10),
    "etth2": (2, 1024, 2048, 8, 48, 7, 0.0001, 32, 10),
    "traffic": (4, 512, 2048, 8, 96, 4, 0.0002, 4, 10),
    "weather": (3, 512, 2048, 8, 96, 4, 0.0001, 32, 10),
    "solar": (2, 1024, 2048, 8, 48, 8, 0.0002, 16, 10),
    "impute_ettm1": (2, 256, 1024, 8, 16, 21, 0.002, 32, 20),
    "impute_ettm2": (1, 256, 1024, 8, 32, 24, 0.002, 32, 20),
    "impute_etth1": (2, 256, 1024, 8, 16, 24, 0.002, 32, 20),
    "impute_etth2": (1, 256, 1024, 8, 16, 24, 0.001, 32, 20),
    "impute_ecl": (2, 256, 512, 8, 16, 24, 0.0005, 32, 20),
    "impute_weather": (1, 256, 1024, 8, 16, 24, 0.002, 32, 20),
}


@pytest.mark.parametrize("name", sorted(BUNDLED_FORECAST_ROWS))
def test_bundled_configs_match_table(name):
    cfg = ModelConfig.from_file(os.path.join(CONFIG_DIR, name + ".cfg"))
    got = (cfg.n_layers, cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.patch_len, cfg.edge_num, cfg.lr, cfg.batch_size, cfg.epochs)
    assert got == BUNDLED_FORECAST_ROWS[name]
    assert cfg.lr_schedule == "cosine"
    if name.startswith("impute_"):
        assert cfg.lookback == 1024 and not cfg.causal and cfg.task == "impute"
    else:
        assert cfg.lookback == 672 and cfg.causal
