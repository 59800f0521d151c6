import json
import math

import numpy as np
import pytest

from lmmpf import bench as B
from lmmpf.cli import main
from lmmpf.errors import ConfigError


@pytest.fixture(scope="module")
def metabolic_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("gen") / "m.csv"
    assert main(["gen", "--problem", "metabolic", "--seed", "3", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def batch_run(metabolic_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["run", "--data", str(metabolic_csv), "--backend", "batch", "--particles", "60",
                 "--seed", "3", "--out", str(out)])
    assert code == 0
    return out


# -- data generation -------------------------------------------------------------------------


def test_gen_metabolic_shape(metabolic_csv):
    ds = B.load_data(metabolic_csv)
    assert ds.Y.shape == (50, 3) and ds.times.size == 50
    assert metabolic_csv.read_text().splitlines()[0] == "t,y1,y2,y3"
    meta = json.loads(B.sidecar_path(metabolic_csv).read_text())
    assert meta["truth"] == [2.0, 0.5, 1.0, 0.8] and meta["seed"] == 3 and meta["sigma"] > 0


def test_gen_advdiff_n40_shape(tmp_path):
    path = tmp_path / "a.csv"
    assert main(["gen", "--problem", "advdiff", "--n", "40", "--seed", "1", "--out", str(path)]) == 0
    ds = B.load_data(path)
    assert ds.Y.shape == (30, 20)
    assert np.array_equal(ds.times, np.arange(1.0, 31.0))
    idx = ds.obs_indices
    assert idx.size == 20 and np.unique(idx).size == 20 and idx.max() < 39 * 39


def test_gen_is_byte_identical(tmp_path, metabolic_csv):
    again = tmp_path / "m.csv"
    assert main(["gen", "--problem", "metabolic", "--seed", "3", "--out", str(again)]) == 0
    assert again.read_bytes() == metabolic_csv.read_bytes()
    assert B.sidecar_path(again).read_bytes() == B.sidecar_path(metabolic_csv).read_bytes()


def test_gen_rejects_tiny_sigma(tmp_path, capsys):
    code = main(["gen", "--problem", "metabolic", "--sigma", "1e-300", "--out", str(tmp_path / "x.csv")])
    assert code == 2
    assert "sigma" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        B.generate_data(B.metabolic_problem(), 0, tmp_path / "y.csv", sigma=1e-13)


def test_generated_data_tracks_reference(metabolic_csv):
    ds = B.load_data(metabolic_csv)
    X = B.reference_trajectory(B.metabolic_problem())
    z = (ds.Y - X) / ds.sigma
    assert abs(z.mean()) < 0.2 and 0.8 < z.std() < 1.2


def test_float_format_round_trips():
    for v in (0.1, 1 / 3, 1e-300, -2.5e17, math.pi):
        assert float(B.fmt(v)) == v


# -- runs -----------------------------------------------------------------------------------


def test_run_writes_trace_and_report(batch_run):
    trace = B.read_trace(batch_run / "trace_metabolic_bdf2_batch.csv")
    assert trace["j"].tolist() == list(range(51))
    assert trace["names"] == ["V1", "k1", "V2", "k2"]
    assert np.isfinite(trace["mean"]).all() and np.isfinite(trace["var"]).all()
    rep = B.load_report(batch_run / "report_metabolic_bdf2_batch.json")
    assert set(rep) == set(B.REPORT_KEYS)
    cfg = B.ExperimentConfig(**rep["config"])
    assert rep["config_hash"] == cfg.hash()
    assert rep["wall_time_s"] > 0 and rep["efficiency"] is None


def test_trace_header(batch_run):
    head = (batch_run / "trace_metabolic_bdf2_batch.csv").read_text().splitlines()[0]
    assert head == ("j,t,theta_mean_V1,theta_mean_k1,theta_mean_V2,theta_mean_k2,"
                    "theta_var_V1,theta_var_k1,theta_var_V2,theta_var_k2,ess")


def test_repeated_run_identical_trace(batch_run, metabolic_csv, tmp_path):
    assert main(["run", "--data", str(metabolic_csv), "--backend", "batch", "--particles", "60",
                 "--seed", "3", "--out", str(tmp_path)]) == 0
    name = "trace_metabolic_bdf2_batch.csv"
    assert (tmp_path / name).read_bytes() == (batch_run / name).read_bytes()


def test_config_hash_sensitivity():
    a = B.ExperimentConfig(N=100, seed=1)
    assert a.hash() == B.ExperimentConfig(N=100, seed=1, out="elsewhere").hash()
    assert a.hash() != B.ExperimentConfig(N=101, seed=1).hash()
    assert a.problem_hash() == B.ExperimentConfig(N=100, seed=1, backend="par", workers=4).problem_hash()
    with pytest.raises(ConfigError):
        B.ExperimentConfig(integrator="rk4")


def test_problem_mismatch_exit_code(metabolic_csv, tmp_path):
    code = main(["run", "--data", str(metabolic_csv), "--problem", "advdiff", "--out", str(tmp_path)])
    assert code == 2


def test_missing_data_exit_code(tmp_path):
    assert main(["run", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 4


def test_batched_adaptive_is_config_error(metabolic_csv, tmp_path):
    code = main(["run", "--data", str(metabolic_csv), "--backend", "batch", "--integrator",
                 "adaptive-bdf2", "--particles", "5", "--out", str(tmp_path)])
    assert code == 2


def test_numerical_failure_exit_code(metabolic_csv, tmp_path, monkeypatch):
    from lmmpf.errors import TotalDegeneracyError

    def degenerate(*a, **k):
        raise TotalDegeneracyError("every particle has zero likelihood")

    monkeypatch.setattr(B, "run", degenerate)
    code = main(["run", "--data", str(metabolic_csv), "--particles", "3", "--out", str(tmp_path)])
    assert code == 3


# -- speedup and reports -----------------------------------------------------------------------


def _rep(backend, wall, workers=1, integrator="bdf2"):
    cfg = B.ExperimentConfig(backend=backend, workers=workers, integrator=integrator, N=10)
    return {"config": cfg.to_dict(), "problem_hash": cfg.problem_hash(), "backend": backend,
            "workers": cfg.workers, "wall_time_s": wall}


@pytest.mark.parametrize("t1,tp,S,E", [(918, 483, 1.90, 0.24), (5150, 1650, 3.12, 0.39)])
def test_compute_speedup_examples(t1, tp, S, E):
    s, e = B.compute_speedup(_rep("seq", t1), _rep("par", tp, workers=8))
    assert round(s, 2) == S and round(e, 2) == E


def test_compute_speedup_identity_and_batch():
    base = _rep("seq", 3.0)
    assert B.compute_speedup(base, _rep("par", 3.0, workers=4)) == (1.0, 0.25)
    s, e = B.compute_speedup(base, _rep("batch", 1.5))
    assert s == 2.0 and e is None
    other = _rep("par", 1.0, workers=2)
    other["problem_hash"] = "different"
    with pytest.raises(ConfigError):
        B.compute_speedup(base, other)


def test_speedup_table_columns_and_rows():
    reports = [_rep("seq", 10.0), _rep("par", 4.0, workers=4), _rep("batch", 2.0),
               _rep("seq", 6.0, integrator="am1")]
    table = B.speedup_table(reports)
    assert [r["integrator"] for r in table] == ["bdf2", "am1"]
    assert all(tuple(r) == B.TABLE_COLUMNS for r in table)
    assert table[0]["S_P"] == 2.5 and table[0]["E_P"] == 0.625
    assert table[1]["parallel_s"] is None and table[1]["S_P"] is None
    assert len(B.speedup_table([_rep("seq", 1.0)])) == 1


def test_report_command_emits_tables_and_plots(batch_run):
    assert main(["report", "--out", str(batch_run)]) == 0
    head = (batch_run / "speedup_table.csv").read_text().splitlines()[0]
    assert head == "integrator,sequential_s,parallel_s,batched_s,S_P,E_P"
    svgs = sorted(p.name for p in batch_run.glob("param_*.svg"))
    assert svgs == ["param_V1.svg", "param_V2.svg", "param_k1.svg", "param_k2.svg"]
    summary = json.loads((batch_run / "summary.json").read_text())
    assert len(summary["table"]) == 1


def test_report_artifacts_reproducible(batch_run, tmp_path):
    rep = B.load_report(batch_run / "report_metabolic_bdf2_batch.json")
    B.emit_report([rep], tmp_path / "a")
    B.emit_report([rep], tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_advdiff_plot_count(tmp_path):
    names = ["k1", "k2", "k3", "c1", "c2"]
    rep = _rep("seq", 1.0)
    rep["config"]["problem"] = "advdiff"
    rep["truth"] = [9, 4, 6, 2.5, -1.5]
    rep["_trace"] = type("T", (), {"t": np.arange(3.0), "theta_mean": np.ones((3, 5)),
                                   "theta_var": np.zeros((3, 5)), "param_names": tuple(names)})()
    assert len(B.plot_traces([rep], tmp_path)) == 5


def test_report_without_inputs_is_config_error(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2
    with pytest.raises(ConfigError):
        B.emit_report([], tmp_path)


def test_bench_records_baseline_first(metabolic_csv, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PFSMC_WORKERS", "2")
    code = main(["bench", "--data", str(metabolic_csv), "--particles", "8", "--integrators", "ab1",
                 "--backends", "batch,par", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    lines = [ln for ln in out.splitlines() if ln.startswith("metabolic_")]
    assert lines[0].startswith("metabolic_ab1_seq") and "par2" in lines[2]
    rep = B.load_report(tmp_path / "report_metabolic_ab1_par2.json")
    assert rep["speedup"] > 0 and rep["efficiency"] == pytest.approx(rep["speedup"] / 2)
