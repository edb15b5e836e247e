import csv
import io
import json

import pytest

from carousel.cli import SweepSpec, main
from carousel.errors import CarouselError

EXP = '{"type":"erlang_mixture","mu":2.0,"alpha":[1.0]}'
ERL42 = '{"type":"erlang_mixture","mu":4.0,"alpha":[0.0,1.0]}'
HYPER = '{"type":"hyperexponential","p":[0.5,0.5],"mu":[1.0,3.0]}'


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_solve_report(capsys):
    code, out, _ = run(capsys, "solve", "--dist", EXP)
    assert code == 0
    row = json.loads(out)["results"][0]
    assert row["method"] == "analytic"
    assert row["tau"] * (row["ew"] + 0.5) == pytest.approx(1.0, abs=1e-12)


def test_solve_dist_from_file(capsys, tmp_path):
    path = tmp_path / "d.json"
    path.write_text(HYPER)
    code, out, _ = run(capsys, "solve", "--dist", str(path), "--grid-size", "2000")
    assert code == 0
    assert json.loads(out)["results"][0]["method"] == "grid"


def test_hyperexponential_analytic_is_solver_error(capsys):
    code, _, err = run(capsys, "solve", "--dist", HYPER, "--method", "analytic")
    assert code == 2
    assert "grid" in json.loads(err)["message"]


def test_analytic_and_grid_agree(capsys):
    taus = []
    for method in ("analytic", "grid"):
        code, out, _ = run(capsys, "solve", "--dist", ERL42, "--method", method)
        assert code == 0
        taus.append(json.loads(out)["results"][0]["tau"])
    assert abs(taus[0] - taus[1]) < 1e-5


def test_solve_density_csv(capsys, tmp_path):
    out = tmp_path / "f.csv"
    assert main(["solve", "--dist", EXP, "--format", "csv", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "x,f" and len(lines) == 1002


@pytest.mark.parametrize("argv", [
    ["solve", "--dist", "{not json"],
    ["solve", "--dist", "/nonexistent/file.json"],
    ["solve", "--dist", '{"type":"erlang_mixture","mu":-1,"alpha":[1]}'],
    ["solve"],
    ["bogus"],
    ["fit", "--mean", "0.5", "--scv", "-1"],
    ["simulate", "--dist", EXP, "--steps", "1000"],
])
def test_input_errors_exit_1(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert set(json.loads(err)) == {"error", "message", "exit_code"}


def test_fit_boundary(capsys):
    code, out, _ = run(capsys, "fit", "--mean", "0.5", "--scv", "0.5")
    assert code == 0
    d = json.loads(out)["distribution"]
    assert d["type"] == "erlang_mixture" and d["alpha"] == [0.0, 1.0]
    assert d["mu"] == pytest.approx(4.0)


def test_fit_hyperexponential(capsys):
    code, out, _ = run(capsys, "fit", "--mean", "0.5", "--scv", "2.0")
    obj = json.loads(out)
    assert code == 0
    assert obj["distribution"]["p"][0] == pytest.approx(0.788675, abs=1e-6)
    assert obj["relative_error"] < 1e-10


def test_simulate_csv_is_reproducible(capsys, tmp_path):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        assert main(["simulate", "--dist", EXP, "--steps", "100000", "--seed", "7",
                     "--format", "csv", "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_text().startswith("bin_left,bin_right,mass\n")


def test_simulate_brackets_analytic_tau(capsys):
    _, out, _ = run(capsys, "solve", "--dist", EXP)
    tau = json.loads(out)["results"][0]["tau"]
    code, out, _ = run(capsys, "simulate", "--dist", EXP, "--steps", "10000000", "--seed", "1")
    row = json.loads(out)["results"][0]
    assert code == 0
    assert abs(row["tau"] - tau) < 3 * row["tau_se"]


def test_small_sweep(capsys, tmp_path):
    out = tmp_path / "s.csv"
    rep = tmp_path / "r.json"
    code = main(["sweep", "--means", "0.5", "--scv-lo", "0.5", "--scv-hi", "1.5",
                 "--scv-step", "0.5", "--out", str(out), "--report", str(rep)])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [r["method"] for r in rows] == ["erlang_mixture:analytic"] * 2 + ["hyperexponential:grid"]
    report = json.loads(rep.read_text())
    assert len(report["seeds"]) == 3 and report["config"]["relative_spread"]


def test_sweep_simulation_method_is_seeded(capsys, tmp_path):
    texts = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.csv"
        main(["sweep", "--means", "0.5", "--scv-lo", "1", "--scv-hi", "1", "--method",
              "simulation", "--steps", "20000", "--seed", "3", "--out", str(out)])
        texts.append(out.read_bytes())
    assert texts[0] == texts[1]
    assert b"simulation" in texts[0]


@pytest.mark.parametrize("kwargs", [dict(means=()), dict(means=(-1.0,)), dict(scv_lo=0.0),
                                    dict(scv_step=0.0), dict(scv_lo=2.0, scv_hi=1.0),
                                    dict(method="magic")])
def test_sweep_spec_validation(kwargs):
    with pytest.raises(CarouselError):
        SweepSpec(**kwargs)


def test_sweep_scv_grid_hits_one_exactly():
    values = SweepSpec().scv_values()
    assert len(values) == 8 and 1.0 in values.tolist()
