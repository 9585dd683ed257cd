import csv
import json

import numpy as np
import pytest

from tailtreat import __version__
from tailtreat._rng import stream
from tailtreat.cli import EXIT_INPUT, main
from tailtreat.dataset import write_csv
from tailtreat.simulation import DGPConfig, generate


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    sim = generate(DGPConfig(n=800, rho=0.5), rng=stream(40, 0))
    write_csv(sim.data, d / "sim.csv")
    return d / "sim.csv"


def read(path):
    lines = path.read_text().splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    rows = list(csv.DictReader([ln for ln in lines if not ln.startswith("#")]))
    return comments, rows


def test_estimate_default_grid(tmp_path, data_csv):
    assert main(["estimate", "--data", str(data_csv), "--out", str(tmp_path)]) == 0
    comments, rows = read(tmp_path / "estimates.csv")
    assert len(rows) == 81
    assert comments[0] == f"# tailtreat {__version__}"
    assert {"tau", "qte", "ctate", "se_theta2_d", "pcb_ctate_lo", "pcb_ctate_hi"} <= set(rows[0])
    for r in rows:
        assert float(r["pcb_ctate_lo"]) <= float(r["ctate"]) <= float(r["pcb_ctate_hi"])
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["version"] == __version__
    assert run["config"]["weights"] == "projected"
    assert set(run["weights"]) >= {"complier_share_estimate", "raw_negative_share"}
    assert len(run["cte_above_quantile"]) == 81


def test_unit_mode_matches_library(tmp_path, data_csv):
    from tailtreat.dataset import load_csv
    from tailtreat.estimator import fit_profile
    from tailtreat.nuisance import unit_weights
    assert main(["estimate", "--data", str(data_csv), "--weights", "unit", "--grid", "0.3,0.6",
                 "--out", str(tmp_path)]) == 0
    _, rows = read(tmp_path / "estimates.csv")
    ds = load_csv(data_csv)
    prof = fit_profile(ds, unit_weights(ds.n), [0.3, 0.6])
    np.testing.assert_array_equal([float(r["ctate"]) for r in rows], prof.ctate)


def test_config_file_and_override(tmp_path, data_csv):
    ini = tmp_path / "c.ini"
    ini.write_text("[tailtreat]\ngrid = 0.2:0.8:0.3\nweights = unit\n")
    out = tmp_path / "o"
    assert main(["estimate", "--data", str(data_csv), "--config", str(ini), "--weights", "projected",
                 "--out", str(out)]) == 0
    _, rows = read(out / "estimates.csv")
    assert [r["tau"] for r in rows] == ["0.2", "0.5", "0.8"]
    assert json.loads((out / "run.json").read_text())["config"]["weights"] == "projected"


def test_input_errors(tmp_path, data_csv, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("outcome,d,z\n1,0,1\n2,1,0\n")
    assert main(["estimate", "--data", str(bad), "--out", str(tmp_path)]) == EXIT_INPUT
    assert "y" in capsys.readouterr().err
    assert main(["estimate", "--data", str(tmp_path / "missing.csv")]) == EXIT_INPUT
    assert main(["estimate", "--data", str(data_csv), "--grid", "0.5:1.2:0.1"]) == EXIT_INPUT
    with pytest.raises(SystemExit) as ei:
        main(["estimate", "--weights", "other"])
    assert ei.value.code == 2


def test_simulate(tmp_path):
    args = ["simulate", "--n", "300", "--rho", "0", "--reps", "3", "--seed", "7", "--methods", "M3,M4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "report.csv").read_text()
    assert a == (tmp_path / "b" / "report.csv").read_text()
    rows = list(csv.DictReader(a.splitlines()))
    assert {r["method"] for r in rows} == {"M3", "M4"}
    assert len(rows) == 2 * 9 * 2
    meta = json.loads((tmp_path / "a" / "report.json").read_text())
    assert meta["version"] == __version__ and meta["config"]["R"] == 3


def test_bands(tmp_path, data_csv):
    args = ["bands", "--data", str(data_csv), "--boot-B", "20", "--grid", "0.2:0.8:0.2", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    _, rows = read(tmp_path / "a" / "bands.csv")
    assert list(rows[0]) == ["tau", "center", "pcb_lo", "pcb_hi", "scb_lo", "scb_hi"]
    for r in rows:
        v = {k: float(x) for k, x in r.items()}
        assert v["scb_hi"] - v["scb_lo"] >= v["pcb_hi"] - v["pcb_lo"] - 1e-12
    strip = [ln for ln in (tmp_path / "a" / "bands.csv").read_text().splitlines() if not ln.startswith("#")]
    strip_b = [ln for ln in (tmp_path / "b" / "bands.csv").read_text().splitlines() if not ln.startswith("#")]
    assert strip == strip_b
    assert main(["bands", "--data", str(data_csv), "--boot-B", "1", "--out", str(tmp_path / "c")]) == EXIT_INPUT
