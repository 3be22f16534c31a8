import csv
import json
import math

import numpy as np
import pytest

from sosmanifold.cli import EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK, EXIT_VALIDATION, main
from sosmanifold.polyalg import Polynomial
from sosmanifold.soscert import LyapunovCertificate


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], np.array(rows[1:], dtype=float)
    return header, data


@pytest.fixture(scope="module")
def circle_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("circle")
    assert main(["certify", "--example", "circle", "--out", str(out)]) == EXIT_OK
    return out


def test_certify_writes_report_and_certificate(circle_dir):
    report = json.loads((circle_dir / "solver_report.json").read_text())
    assert report["status"] == "Optimal"
    assert report["certificate_status"] == "valid"
    assert report["degree_budget"] == 8
    cert = LyapunovCertificate.from_json((circle_dir / "certificate.json").read_text())
    assert cert.nvars == 2


def test_certify_is_byte_identical_across_runs(circle_dir, tmp_path):
    assert main(["certify", "--example", "circle", "--out", str(tmp_path)]) == EXIT_OK
    for name in ("solver_report.json", "certificate.json"):
        assert (tmp_path / name).read_bytes() == (circle_dir / name).read_bytes()


def test_validate_passes_and_writes_trajectory(circle_dir):
    code = main(
        ["validate", "--example", "circle", "--out", str(circle_dir), "--samples", "500", "--trajectories", "5"]
    )
    assert code == EXIT_OK
    rep = json.loads((circle_dir / "validation.json").read_text())
    assert rep["passed"] and rep["n_trajectories"] == 5
    header, data = read_csv(circle_dir / "trajectory_000.csv")
    assert header[:3] == ["t", "x1", "x2"] and "V" in header
    assert data.shape[0] <= 2001
    assert np.all(np.diff(data[:, header.index("V")]) <= 1e-9)


def test_validate_rejects_tampered_certificate(circle_dir, tmp_path):
    cert = LyapunovCertificate.from_json((circle_dir / "certificate.json").read_text())
    cert.V = cert.V - Polynomial.monomial((0, 2), 10.0 * cert.V.max_abs_coeff())
    bad = tmp_path / "bad.json"
    bad.write_text(cert.to_json())
    code = main(
        ["validate", "--example", "circle", "--certificate", str(bad), "--out", str(tmp_path), "--trajectories", "0"]
    )
    assert code == EXIT_VALIDATION


def test_fit_aero_outputs(tmp_path):
    assert main(["fit-aero", "--out", str(tmp_path)]) == EXIT_OK
    header, data = read_csv(tmp_path / "fit_aero.csv")
    assert header == ["cos_delta", "H1", "H1_fit", "H2", "H2_fit"]
    assert data.shape == (401, 5)
    assert np.max(np.abs(data[:, 1] - data[:, 2])) < 0.05
    fit = json.loads((tmp_path / "fit_aero.json").read_text())
    assert len(fit["H1"]) == 3 and len(fit["H2"]) == 5


def test_speed_ratio_override_changes_fit(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"env": {"s_i": 5.0}}))
    assert main(["fit-aero", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["fit-aero", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_OK
    a = json.loads((tmp_path / "a" / "fit_aero.json").read_text())
    b = json.loads((tmp_path / "b" / "fit_aero.json").read_text())
    assert b["env"]["s_i"] == 5.0
    assert a["H2"] != b["H2"]


def test_simulate_rate_columns(tmp_path):
    code = main(["simulate", "--example", "aero", "--seed", "3", "--t-end", "50", "--out", str(tmp_path)])
    assert code == EXIT_OK
    header, data = read_csv(tmp_path / "simulation.csv")
    for j in (1, 2, 3):
        rad = data[:, header.index(f"omega{j}_rad_s")]
        deg = data[:, header.index(f"omega{j}_deg_s")]
        np.testing.assert_allclose(deg, rad * 180.0 / math.pi, rtol=1e-15)
        # the state stores 20 * omega
        np.testing.assert_allclose(rad, data[:, header.index(f"x{j + 3}")] / 20.0, rtol=1e-15)


def test_simulate_from_origin_stays_at_rest(tmp_path):
    code = main(["simulate", "--example", "quat", "--x0", "0,0,0,0,0,0,0", "--t-end", "10", "--out", str(tmp_path)])
    assert code == EXIT_OK
    header, data = read_csv(tmp_path / "simulation.csv")
    assert data.shape[0] == 101
    assert np.all(data[:, 1:] == 0.0)


def test_max_iter_without_certificate_exits_2(tmp_path):
    code = main(["certify", "--example", "circle", "--max-iter", "1", "--out", str(tmp_path)])
    assert code == EXIT_INFEASIBLE
    assert json.loads((tmp_path / "solver_report.json").read_text())["status"] == "MaxIter"
    assert not (tmp_path / "certificate.json").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["certify", "--example", "torus"],
        ["certify", "--degree-v", "3"],
        ["certify", "--eps", "-1"],
        ["simulate", "--example", "circle", "--x0", "0.5,0.5"],
        ["simulate", "--example", "circle", "--x0", "0,0,0"],
        ["simulate", "--example", "circle", "--x0", "a,b"],
        ["validate", "--example", "circle", "--certificate", "/nonexistent/cert.json"],
        ["validate", "--samples", "0"],
        [],
    ],
)
def test_input_errors_exit_4(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)] if argv else argv) == EXIT_INPUT


def test_config_errors_exit_4(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"eps1": -1e-5}))
    assert main(["certify", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INPUT
    cfg.write_text(json.dumps({"no_such_key": 1}))
    assert main(["certify", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INPUT
    cfg.write_text(json.dumps({"gains": {"k_D": -0.1}}))
    assert main(["simulate", "--example", "aero", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INPUT


def test_certificate_dimension_mismatch_exit_4(circle_dir, tmp_path):
    code = main(
        ["validate", "--example", "quat", "--certificate", str(circle_dir / "certificate.json"), "--out", str(tmp_path)]
    )
    assert code == EXIT_INPUT


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"example": "quat", "t_end": 5.0}))
    assert main(["simulate", "--config", str(cfg), "--example", "circle", "--out", str(tmp_path)]) == EXIT_OK
    header, data = read_csv(tmp_path / "simulation.csv")
    assert header[:3] == ["t", "x1", "x2"] and len(header) == 3
    assert data[-1, 0] == pytest.approx(5.0)
