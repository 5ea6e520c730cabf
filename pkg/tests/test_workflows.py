import json
from dataclasses import replace

import numpy as np
import pytest

import nvcce.workflows as wf
from nvcce.engine import CoherenceCurve
from nvcce.workflows import RunConfig, ValidationError

TINY = dict(ppm=[100.0], r_bath=45.0, r_dipole=35.0, n_configs=3, n_mc_samples=2, n_times=41)


def fake_compute(params, config_id, fail=()):
    if config_id in fail:
        raise RuntimeError("boom")
    t = np.asarray(params["times"])
    t2 = 0.05 / params["ppm"] * (1 + 0.05 * np.sin(config_id))
    c = CoherenceCurve(t, np.exp(-((t / t2) ** 1.4)), {"config_id": config_id, "n_spins": 10})
    c.metadata["run_key"] = wf.run_key(params)
    return c


def test_validation_messages():
    with pytest.raises(ValidationError, match="ppm"):
        RunConfig(ppm=[-1]).validate()
    with pytest.raises(ValidationError, match="fit method"):
        RunConfig(fit_methods=["cubic"]).validate()
    with pytest.raises(ValidationError, match="L_f"):
        RunConfig(l_f=[1.2]).validate()
    with pytest.raises(ValidationError, match="unknown RunConfig fields"):
        RunConfig.from_dict({"ppm": [1], "temperature": 3})
    with pytest.raises(ValidationError, match="supercell"):
        RunConfig(r_bath=3000.0).validate()


def test_scale_presets():
    assert (RunConfig(scale="desk").n_configs, RunConfig(scale="desk").n_mc_samples) == (100, 64)
    assert (RunConfig(scale="production").n_configs, RunConfig(scale="production").n_mc_samples) == (500, 128)
    assert RunConfig(scale="desk", n_configs=7).n_configs == 7


def test_auto_cutoffs():
    for order, table in wf.CUTOFF_TABLE.items():
        for ppm, (rd, rb) in table.items():
            assert wf.auto_cutoffs(ppm, order) == pytest.approx((rd, rb))
    rd, rb = wf.auto_cutoffs(30.0, 2)
    assert 105 < rd < 210 and 125 < rb < 250
    assert RunConfig(r_bath=77.0).cutoffs(1.0) == pytest.approx((400.0, 77.0))


def test_zero_concentration_run(tmp_path):
    res = wf.run_simulation(RunConfig(ppm=[0.0], n_configs=1, n_mc_samples=1, output_dir=str(tmp_path)))[0.0]
    np.testing.assert_allclose(res.average.values, 1.0, atol=1e-12)
    assert "degenerate" in res.fits["exponential@0.4"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert "degenerate" in summary["concentrations"]["0"]["fits"]["exponential@0.4"]


def test_summary_byte_identical_and_resumable(tmp_path):
    cfg = RunConfig(**TINY, output_dir=str(tmp_path), fit_methods=["exponential", "linear"])
    wf.run_simulation(cfg)
    first = (tmp_path / "summary.json").read_bytes()
    wf.run_simulation(cfg)
    assert (tmp_path / "summary.json").read_bytes() == first
    # lose part of the run, as if it were killed, then resume
    edir = next(tmp_path.glob("ppm_*/order_*/B_*"))
    (edir / "config_0001.csv").unlink()
    (tmp_path / "summary.json").unlink()
    wf.run_simulation(cfg)
    assert (tmp_path / "summary.json").read_bytes() == first
    meta = json.loads((edir / "average.json").read_text())
    assert meta["run_config"]["ppm"] == [100.0] and "code_version" in meta


def test_parallel_schedule_identical(tmp_path):
    a = wf.run_simulation(RunConfig(**TINY))[100.0]
    b = wf.run_simulation(RunConfig(**TINY, workers=2))[100.0]
    np.testing.assert_array_equal(a.average.values, b.average.values)


def test_failure_policy(monkeypatch):
    calls = []

    def flaky(params, i):
        calls.append(i)
        return fake_compute(params, i, fail={3})

    monkeypatch.setattr(wf, "compute_configuration", flaky)
    res = wf.run_simulation(RunConfig(ppm=[10.0], n_configs=200, n_mc_samples=1))[10.0]
    assert res.failed == [3] and len(res.members) == 199
    assert calls.count(3) == 2  # retried once
    monkeypatch.setattr(wf, "compute_configuration", lambda p, i: fake_compute(p, i, fail={0, 1, 2}))
    with pytest.raises(wf.ComputeFailure, match="3 of 200"):
        wf.run_simulation(RunConfig(ppm=[10.0], n_configs=200, n_mc_samples=1))


def test_slope():
    ppm = [1.0, 3.0, 10.0, 30.0]
    assert wf.loglog_slope(ppm, [2.5 / p for p in ppm]) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(ValidationError):
        wf.loglog_slope([1.0, 1.0, 3.0], [1, 1, 0.3])


def test_sweep(monkeypatch, tmp_path):
    monkeypatch.setattr(wf, "compute_configuration", fake_compute)
    cfg = RunConfig(ppm=[1.0, 10.0, 100.0], n_configs=4, n_mc_samples=1, output_dir=str(tmp_path))
    rep = wf.sweep_concentration(cfg)
    assert rep["slopes"]["exponential@0.4"] == pytest.approx(-1.0, abs=1e-6)
    with pytest.raises(ValidationError, match="distinct"):
        wf.sweep_concentration(replace(cfg, ppm=[1.0, 1.0, 10.0]))


def test_compare_orders():
    rep = wf.compare_orders(RunConfig(**TINY), orders=[2], reference=2)
    assert rep["ratios"]["100"]["2"]["T2_ratio"] == 1.0
    with pytest.raises(ValidationError, match="cost cap"):
        wf.compare_orders(RunConfig(**TINY), orders=[2, 4])


def test_field_scan_flags_zero(monkeypatch):
    monkeypatch.setattr(wf, "compute_configuration", fake_compute)
    rep = wf.field_sensitivity(RunConfig(ppm=[10.0], n_configs=3, n_mc_samples=1), [0.0, 10.0, 100.0])
    rows = rep["table"]["10"]
    assert "flag" in rows["0"] and "flag" not in rows["10"]
    assert rep["relative_spread"]["10"] == pytest.approx(0.0)
    with pytest.raises(ValidationError):
        wf.field_sensitivity(RunConfig(), [-1.0])


def test_converged_index():
    vals = [(1.0, 1.0), (1.3, 1.2), (1.34, 1.21), (1.35, 1.22)]
    assert wf._converged_index(vals, 0.05) == 1
    assert wf._converged_index([(1.0, 1.0), (2.0, 1.0), (3.0, 1.0)], 0.05) is None


def test_scan_convergence_small(tmp_path):
    cfg = RunConfig(ppm=[100.0], n_configs=2, n_mc_samples=2, n_times=41, output_dir=str(tmp_path))
    rep = wf.scan_convergence(cfg, [25.0, 35.0], [40.0, 50.0])
    row = rep["table"]["2"]["100"]
    assert set(row["r_bath_scan"]) == {"40", "50"}
    assert isinstance(row["bracketed"], bool)
    assert (tmp_path / "convergence.json").exists()
    with pytest.raises(ValidationError):
        wf.scan_convergence(cfg, [25.0], [40.0, 50.0])


def test_zfs_override():
    assert RunConfig(zfs=3.0).central().zfs[2, 2] == pytest.approx(2.0)
    assert RunConfig().central().zfs[2, 2] == pytest.approx(2 / 3 * 2 * np.pi * 2.87e6)
