import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from fdbeam.cli import dispatch, parse_values


def _checksums(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file() and path.name != "run.json":
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


@pytest.fixture()
def small_config(tmp_path):
    cfg = {
        "site": {"site_seed": 5, "n_reflectors": 5, "dynamic_blocker_count": 2},
        "array": {"nt": 4, "nr": 4, "tx_shape": [2, 2], "rx_shape": [2, 2]},
        "calibration": {"n_scenes": 120},
        "dataset": {"n_scenes": 30, "k_max": 4, "kappa_set_db": [0.0], "seed": 3},
        "experiment": {"k": 2, "l": 56, "m": 4, "kappa_db": 0.0},
        "model": {"d_embed": 32, "n_heads": 2, "enc_layers": 1, "probe_layers": 1,
                  "serve_layers": 1, "ff_expansion": 2, "max_m": 8},
        "training": {"steps": 10, "batch_size": 4, "eval_every": 5, "val_scenes": 4,
                     "ks": [2, 4], "ms": [2, 4], "kappas_db": [0.0]},
        "evaluation": {"n_test_scenes": 3, "seed": 11},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_values_range_syntax():
    assert parse_values("-20:20:10") == [-20, -10, 0, 10, 20]
    assert parse_values("1,2,4") == [1.0, 2.0, 4.0]


def test_eval_matrix_csi_closed_form(capsys):
    rc = dispatch(["eval", "--method", "matrix_csi", "--k", "8", "--l", "56"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "0.6364" in out


def test_eval_vector_csi_closed_form(capsys):
    rc = dispatch(["eval", "--method", "vector_csi", "--k", "8", "--l", "56"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "0.7778" in out


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        dispatch(["eval", "--method", "matrix_csi", "--bogus", "1"])
    assert exc.value.code == 2


def test_unknown_method_exits_2():
    with pytest.raises(SystemExit) as exc:
        dispatch(["eval", "--method", "psycho"])
    assert exc.value.code == 2


def test_missing_data_is_failure(capsys):
    rc = dispatch(["eval", "--method", "mrt_mrc"])
    assert rc == 1


def test_gen_data_deterministic(tmp_path, small_config, capsys):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert dispatch(["gen-data", "--config", str(small_config), "--out", str(a)]) == 0
    assert dispatch(["gen-data", "--config", str(small_config), "--out", str(b)]) == 0
    assert _checksums(a) == _checksums(b)
    assert (a / "run.json").exists()


def test_full_cli_pipeline(tmp_path, small_config, capsys):
    data = tmp_path / "data"
    assert dispatch(["gen-data", "--config", str(small_config), "--out", str(data)]) == 0

    cal_dir = tmp_path / "cal"
    assert dispatch(["calibrate", "--config", str(small_config), "--out", str(cal_dir)]) == 0
    cal = json.loads((cal_dir / "calibration.json").read_text())
    assert cal["sigma2_dl"] > 0

    run = tmp_path / "run"
    assert dispatch(["pretrain", "--config", str(small_config), "--data", str(data),
                     "--out", str(run)]) == 0
    ckpt = run / "pretrain_best"
    assert (ckpt / "model.json").exists()

    ft = tmp_path / "ft"
    assert dispatch(["finetune", "--config", str(small_config), "--data", str(data),
                     "--ckpt", str(ckpt), "--out", str(ft), "--steps", "8"]) == 0

    out_dir = tmp_path / "eval"
    assert dispatch(["eval", "--config", str(small_config), "--method", "proposed",
                     "--data", str(data), "--ckpt", str(ckpt),
                     "--out", str(out_dir)]) == 0
    assert (out_dir / "metrics.csv").exists()
    assert (out_dir / "run.json").exists()
    import csv as _csv

    with open(out_dir / "metrics.csv", newline="") as fh:
        recs = list(_csv.DictReader(fh))
    metrics = {r["metric"] for r in recs}
    assert {"nsse", "inr_ul", "sinr_ul", "snr_dl"} <= metrics
    for r in recs:
        if r["metric"] == "snr_dl":
            assert r["value_db"] != ""
            assert float(r["value"]) == pytest.approx(
                10 ** (float(r["value_db"]) / 10), rel=1e-9)
        if r["metric"] == "nsse":
            assert r["value_db"] == ""
            assert 0.0 <= float(r["value"]) <= 1.0

    capsys.readouterr()
    out_dir2 = tmp_path / "eval2"
    assert dispatch(["eval", "--config", str(small_config), "--method", "proposed",
                     "--data", str(data), "--ckpt", str(ckpt),
                     "--out", str(out_dir2)]) == 0
    assert (_checksums(out_dir) == _checksums(out_dir2))


def test_eval_metric_csv_deterministic(tmp_path, small_config, capsys):
    data = tmp_path / "data"
    dispatch(["gen-data", "--config", str(small_config), "--out", str(data)])
    outs = []
    for name in ("e1", "e2"):
        out_dir = tmp_path / name
        assert dispatch(["eval", "--config", str(small_config), "--method", "mrt_mrc",
                         "--data", str(data), "--out", str(out_dir)]) == 0
        outs.append((out_dir / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_sweep_emits_rows(tmp_path, small_config, capsys):
    out = tmp_path / "sweep"
    rc = dispatch(["sweep", "--config", str(small_config), "--axis", "kappa",
                   "--values", "-20:20:10", "--methods", "mrt_mrc,vector_csi",
                   "--out", str(out)])
    assert rc == 0
    text = (out / "rows.csv").read_text()
    assert text.count("\n") == 1 + 5 * 2  # header + points x methods
    stdout = capsys.readouterr().out
    assert "5 points" in stdout


def test_plot_command(tmp_path, small_config, capsys):
    out = tmp_path / "sweep"
    dispatch(["sweep", "--config", str(small_config), "--axis", "K",
              "--values", "1,2", "--methods", "mrt_mrc", "--out", str(out)])
    plots = tmp_path / "plots"
    assert dispatch(["plot", "--results", str(out), "--out", str(plots)]) == 0
    assert any(plots.glob("*.png"))


def test_selftest_passes(capsys):
    rc = dispatch(["selftest"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "PASS" in out and "FAIL" not in out
