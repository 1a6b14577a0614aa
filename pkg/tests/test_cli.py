import filecmp
import json

import numpy as np
import pytest

from hallcal import cli
from hallcal.reconstruction import BijectivityError, BijectivityReport
from hallcal.simulation import load_dataset

QUICK = {
    "ramp": {"end": 7.0, "duration": 7.0},
    "multisine": {"realizations": 2, "periods": 2, "f_max": 100.0},
    "calibration": {"max_iterations": 3,
                    "lut_size": 256},
}


@pytest.fixture
def quick_config(tmp_path):
    p = tmp_path / "quick.json"
    p.write_text(json.dumps(QUICK))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_writes_dataset_and_manifest(tmp_path, quick_config):
    out = tmp_path / "sim"
    assert run("simulate", "--config", quick_config, "--out", out) == 0
    ds = load_dataset(out / "dataset.csv")
    assert len(ds) == 7 * 4000 + 1 and ds.y0 is not None
    header = (out / "dataset.csv").read_text().splitlines()[0]
    assert header == "t,d1,d2,d3,y,T,r,y0"
    manifests = list(out.glob("manifest*.json"))
    assert len(manifests) == 1
    m = json.loads(manifests[0].read_text())
    assert m["command"] == "simulate" and m["config_fingerprint"] and m["seeds"]["master"] == 0
    out2 = tmp_path / "sim2"
    assert run("simulate", "--config", quick_config, "--out", out2) == 0
    assert filecmp.cmp(out / "dataset.csv", out2 / "dataset.csv", shallow=False)


def test_full_scale_row_count(tmp_path):
    out = tmp_path / "full"
    assert run("simulate", "--full-scale", "--out", out) == 0
    assert len(load_dataset(out / "dataset.csv")) == 104001


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"ramp": {"duration": 0.0}}))
    assert run("simulate", "--config", bad, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    bad.write_text(json.dumps({"ramp": {"lenght": 3}}))
    assert run("simulate", "--config", bad, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_divergence_exit_3(tmp_path):
    cfg = tmp_path / "hot.json"
    cfg.write_text(json.dumps({"controller": {"kind": "discrete_tf", "num": [500.0],
                                              "den": [1.0]}, "ramp": {"duration": 2.0}}))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_NUMERICAL


def test_pipeline_through_cli(tmp_path, quick_config):
    sim, bla, cal, val = (tmp_path / n for n in ("sim", "bla", "cal", "val"))
    assert run("simulate", "--config", quick_config, "--out", sim) == 0
    assert run("identify-bla", "--config", quick_config, "--out", bla) == 0
    frf = np.loadtxt(bla / "frf.csv", delimiter=",", skiprows=1)
    assert frf.shape == (200, 6)
    assert run("calibrate", "--config", quick_config, "--dataset", sim / "dataset.csv",
               "--bla", bla / "bla.json", "--out", cal) == 0
    for name in ("calibration.json", "table.bin", "table.json", "j_trace.csv",
                 "flux_model.csv", "manifest.json"):
        assert (cal / name).exists()
    trace = np.loadtxt(cal / "j_trace.csv", delimiter=",", skiprows=1, ndmin=2)
    assert np.all(np.diff(trace[:, 1]) < 0)
    assert run("validate", "--dataset", sim / "dataset.csv", "--table", cal / "table.bin",
               "--out", val, "--psd-points", 4096) == 0
    metrics = json.loads((val / "metrics.json").read_text())
    assert metrics["rms_star"] < metrics["rms_init"]
    psd = np.loadtxt(val / "cumulative_psd.csv", delimiter=",", skiprows=1)
    assert np.all(np.diff(psd[:, 1]) >= 0)
    assert psd[-1, 1] == pytest.approx(metrics["psd_total_init"])


def test_validate_requires_truth(tmp_path, quick_config):
    sim = tmp_path / "sim"
    assert run("simulate", "--config", quick_config, "--out", sim) == 0
    ds = load_dataset(sim / "dataset.csv")
    from hallcal.simulation import save_dataset
    from hallcal.reconstruction import CorrectionTable
    save_dataset(ds.without_truth(), tmp_path / "blind.csv")
    (tmp_path / "t.bin").write_bytes(CorrectionTable.zeros(8).to_bytes())
    code = run("validate", "--dataset", tmp_path / "blind.csv", "--table", tmp_path / "t.bin",
               "--out", tmp_path / "v")
    assert code == cli.EXIT_CONFIG


def test_bijectivity_exit_4(tmp_path, quick_config, monkeypatch):
    def broken(*a, **k):
        raise BijectivityError(BijectivityReport(False, ((3, 4),)))
    monkeypatch.setattr(cli, "calibrate", broken)
    sim, bla = tmp_path / "sim", tmp_path / "bla"
    run("simulate", "--config", quick_config, "--out", sim)
    run("identify-bla", "--config", quick_config, "--out", bla)
    code = run("calibrate", "--config", quick_config, "--dataset", sim / "dataset.csv",
               "--bla", bla / "bla.json", "--out", tmp_path / "c")
    assert code == cli.EXIT_BIJECTIVITY


def test_missing_input_exit_2(tmp_path, quick_config):
    code = run("calibrate", "--config", quick_config, "--dataset", tmp_path / "nope.csv",
               "--bla", tmp_path / "nope.json", "--out", tmp_path / "c")
    assert code == cli.EXIT_CONFIG
