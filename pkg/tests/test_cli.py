import csv
import json

import numpy as np
import pytest

from ewlab.cli import main


def _rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def flat_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("flat")
    cfg = _write(d / "flat.json", {"grid": {"n": 16}, "data": {"amp_div": 0.0, "amp_curl": 0.0}, "time": {"t_end": 1.5}})
    assert main(["simulate", "--config", cfg, "--out", str(d / "run")]) == 0
    return d / "run"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    cfg = _write(d / "small.json", {"grid": {"n": 16}, "time": {"t_end": 0.5}})
    assert main(["simulate", "--config", cfg, "--out", str(d / "run")]) == 0
    return d / "run"


def test_simulate_writes_run(small_run):
    for name in ("run.json", "config.json", "series.csv", "diagnostics.csv", "state_000000.ewf"):
        assert (small_run / name).exists()
    rows = _rows(small_run / "diagnostics.csv")
    assert len(rows) == len(list(small_run.glob("state_*.ewf")))


def test_simulate_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"grid": ', encoding="utf-8")
    assert main(["simulate", "--config", str(bad)]) == 2
    assert main(["simulate", "--config", _write(tmp_path / "n.json", {"grid": {"n": 12}})]) == 2
    assert main(["simulate"]) == 2
    assert "error" in capsys.readouterr().err


def test_simulate_unstable_run_exits_3(tmp_path):
    cfg = _write(tmp_path / "big.json", {"grid": {"n": 16}, "data": {"amp_div": 200.0, "amp_curl": 200.0}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "run")]) == 3
    assert (tmp_path / "run" / "run.json").exists()


def test_decompose(small_run, tmp_path):
    assert main(["decompose", "--traj", str(small_run), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "decomposition.json").read_text(encoding="utf-8"))
    assert rep["psi_gap"][0] == 0.0
    assert (tmp_path / "phi_000000.ewf").exists() and (tmp_path / "psi_000000.ewf").exists()


def test_geodesics_on_flat_run(flat_run, tmp_path):
    out = tmp_path / "g.csv"
    assert main(["geodesics", "--traj", str(flat_run), "--tip", "0,1,2,3", "--nomega", "42",
                 "--dt-ray", "0.02", "--out", str(out)]) == 0
    rows = _rows(out)
    tr = np.array([float(r["trchi"]) for r in rows])
    r = np.array([float(r["t"]) - float(r["u"]) for r in rows])
    ok = np.isfinite(tr)
    assert ok.sum() > 0
    assert np.abs(tr[ok] * r[ok] - 2.0).max() <= 1e-4
    assert min(float(r["H"]) for r in rows) > 0


def test_geodesics_snaps_ray_count(flat_run, tmp_path):
    out = tmp_path / "g.csv"
    with pytest.warns(UserWarning, match="icosphere"):
        rc = main(["geodesics", "--traj", str(flat_run), "--tip", "0,1,2,3", "--nomega", "40",
                   "--dt-ray", "0.05", "--out", str(out)])
    assert rc == 0
    ids = {r["ray_id"] for r in _rows(out)}
    assert len(ids) == 42


def test_fluxes_on_flat_run(flat_run, tmp_path):
    out = tmp_path / "f.csv"
    assert main(["fluxes", "--traj", str(flat_run), "--tip", "0,1,2,3", "--nomega", "42",
                 "--dt-ray", "0.02", "--out", str(out)]) == 0
    row = _rows(out)[0]
    assert float(row["F1"]) == 0.0 and float(row["F2"]) == 0.0


@pytest.mark.parametrize("tip", ["0.9,1,2,3", "0,1,2", "a,b,c,d"])
def test_bad_tip_exits_2(small_run, tip):
    assert main(["geodesics", "--traj", str(small_run), "--tip", tip, "--nomega", "42"]) == 2


def test_fluxes_without_valid_samples_exit_2(small_run):
    # default r_min (two grid spacings) exceeds the coverage of this short run
    assert main(["fluxes", "--traj", str(small_run), "--tip", "0,1,2,3", "--nomega", "42", "--dt-ray", "0.02"]) == 2


def test_missing_trajectory_exits_2(tmp_path):
    assert main(["geodesics", "--traj", str(tmp_path), "--tip", "0,1,2,3"]) == 2


def test_check_suite(tmp_path, capsys):
    out = tmp_path / "lp.json"
    assert main(["check", "--suite", "lp", "--json", str(out)]) == 0
    text = capsys.readouterr().out
    assert "criterion 10" in text and "lp: PASS" in text
    rep = json.loads(out.read_text(encoding="utf-8"))
    assert rep["suite"] == "lp" and rep["pass"] is True


def test_check_unknown_suite():
    assert main(["check", "--suite", "nope"]) == 2


def test_convergence_needs_two_levels():
    assert main(["convergence", "--levels", "1"]) == 2


def test_help_lists_defaults(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    assert '"cfl_safety": 0.4' in out and "EWLAB_THREADS" in out
