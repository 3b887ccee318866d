import csv
import json
import math

import numpy as np
import pytest

from bumpsplit.cli import main
from bumpsplit.eigen import solve_lowest
from bumpsplit.fem import assemble
from bumpsplit.geometry import PolygonalDomain
from bumpsplit.mesh import triangulate


@pytest.fixture
def square_json(tmp_path):
    p = tmp_path / "square.json"
    p.write_text(PolygonalDomain.unit_square().to_json())
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_solve_writes_csv(tmp_path, square_json):
    out = tmp_path / "o"
    assert run("solve", "--domain", square_json, "--k", 6, "--h", 0.05, "--out", out, "--svg", "--csv") == 0
    rows = list(csv.DictReader((out / "spectrum.csv").open()))
    assert len(rows) == 6
    assert float(rows[0]["lambda"]) == pytest.approx(2 * math.pi**2, rel=1e-2)
    assert (out / "mesh.svg").read_text().startswith("<?xml")
    assert (out / "traces_edge0.csv").exists()


def test_missing_file(tmp_path, capsys):
    assert run("solve", "--domain", tmp_path / "nope.json", "--out", tmp_path) == 2
    assert json.loads(capsys.readouterr().err)["exit_code"] == 2


def test_k_too_large(tmp_path, square_json, capsys):
    assert run("solve", "--domain", square_json, "--h", 0.5, "--k", 500, "--out", tmp_path) == 2
    assert "degrees of freedom" in capsys.readouterr().err


def test_hadamard_table(tmp_path, square_json):
    out = tmp_path / "h"
    assert run("hadamard", "--domain", square_json, "--h", 0.05, "--edge", 0, "--s0", 0.5, "--out", out, "--t0", 4e-3) == 0
    rep = json.loads((out / "hadamard.json").read_text())
    assert rep["predicted_rates"][0] < 0
    rows = rep["finite_differences"]
    assert [r["t"] for r in rows] == sorted(r["t"] for r in rows)
    errs = [r["rel_error_discrete"] for r in rows]
    assert errs == sorted(errs)  # error against the discrete derivative shrinks with t


def test_hadamard_zero_amplitude(tmp_path, square_json, capsys):
    out = tmp_path / "h0"
    assert run("hadamard", "--domain", square_json, "--h", 0.05, "--edge", 0, "--s0", 0.5, "--out", out, "--t0", 0) == 0
    rep = json.loads((out / "hadamard.json").read_text())
    assert rep["predicted_rates"] and "notice" in rep
    assert "skipped" in capsys.readouterr().err


def test_hadamard_bump_off_edge(tmp_path, square_json):
    assert run("hadamard", "--domain", square_json, "--h", 0.1, "--edge", 0, "--s0", 1.5, "--out", tmp_path) == 2


def test_simplify_bad_epsilon(tmp_path, square_json):
    assert run("simplify", "--domain", square_json, "--epsilon", 0, "--x", "0.5,0", "--out", tmp_path) == 2


def test_simplify_budget_violation(tmp_path, square_json):
    assert run("simplify", "--domain", square_json, "--epsilon", 0.3, "--x", "0.5,0", "--M", 0.6, "--out", tmp_path) == 2


def test_simplify_partial_exit(tmp_path, square_json):
    assert run("simplify", "--domain", square_json, "--epsilon", 0.01, "--x", "0.5,0", "--out", tmp_path) == 4


def test_golden_rectangle_exit_zero(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(PolygonalDomain.rectangle(1.0, (1 + math.sqrt(5)) / 2).to_json())
    out = tmp_path / "g"
    assert run("simplify", "--domain", p, "--epsilon", 0.3, "--x", "0.5,0", "--out", out) == 0
    assert json.loads((out / "trace.json").read_text())["records"] == []


@pytest.mark.slow
def test_simplify_round_trip(tmp_path, square_json):
    out = tmp_path / "s"
    assert run("simplify", "--domain", square_json, "--K", 6, "--epsilon", 0.3, "--x", "0.5,0", "--out", out) == 0
    trace = json.loads((out / "trace.json").read_text())
    final = PolygonalDomain.from_json((out / "final_domain.json").read_text())
    lam = solve_lowest(assemble(triangulate(final, 0.02), final.bc, final.sigma), len(trace["final"]), 1e-8).lambdas
    np.testing.assert_allclose(lam, trace["final"], rtol=1e-8)
    assert run("report", "--out", out) == 0
    assert "status: success" in (out / "report.txt").read_text()
    assert (out / "overlay.svg").exists()


def test_report_without_trace(tmp_path):
    assert run("report", "--out", tmp_path) == 2
