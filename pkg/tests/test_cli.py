import csv
import json
from pathlib import Path

import numpy as np
import pytest

from openloop_lq import cli
from openloop_lq.cli import (
    EXIT_CHECKS,
    EXIT_DIVERGED,
    EXIT_GATE,
    EXIT_OK,
    EXIT_SIZE,
    EXIT_SPEC,
    main,
)
from openloop_lq.problem_model import make_spec, spec_to_dict

from conftest import benchmark, random_a, unsolvable

SPECS = Path(__file__).resolve().parent.parent / "specs"


def write_spec(tmp_path, spec, name="spec.json"):
    path = tmp_path / name
    path.write_text(json.dumps(spec_to_dict(spec)))
    return str(path)


def run(tmp_path, *args):
    out = tmp_path / "out"
    code = main(list(args) + ["--out", str(out)])
    return code, json.loads((out / "report.json").read_text()), out


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_solve_det_benchmark(tmp_path):
    code, rep, out = run(tmp_path, "solve-det", "--spec", str(SPECS / "benchmark.json"))
    assert code == EXIT_OK and rep["status"] == "ok"
    assert rep["results"]["cost"] == pytest.approx(0.5, abs=1e-6)
    header, data = read_csv(out / "control.csv")
    assert header[:2] == ["t", "u_1"]
    assert np.max(np.abs(data[:, 1] + 0.5)) <= 1e-6
    header, data = read_csv(out / "riccati.csv")
    assert header == ["t", "P1_1_1", "P2_1_1", "Ups_1_1"]
    assert np.max(np.abs(data[:, 2] - 1 / (2 - data[:, 0]))) <= 1e-6


def test_solve_random_gate_failure(tmp_path):
    code, rep, _ = run(tmp_path, "solve-random", "--spec", write_spec(tmp_path, unsolvable()))
    assert code == EXIT_GATE
    assert rep["status"] == "unsolvable"
    assert rep["error"]["earliest_t"] == 0.0


def test_solve_det_gate_failure(tmp_path):
    code, rep, _ = run(tmp_path, "solve-det", "--spec", str(SPECS / "unsolvable.json"))
    assert code == EXIT_GATE and rep["status"] == "unsolvable"


def test_solve_random(tmp_path):
    code, rep, out = run(tmp_path, "solve-random", "--spec", str(SPECS / "random_a.json"), "--steps", "8")
    assert code == EXIT_OK
    header, data = read_csv(out / "control.csv")
    assert header == ["t", "u_1", "Ups_1_1"] and data.shape == (8, 3)
    assert np.isfinite(rep["results"]["cost"])


def test_solve_random_above_path_cap(tmp_path):
    code, rep, out = run(tmp_path, "solve-random", "--spec", str(SPECS / "random_a.json"), "--steps", "20")
    assert code == EXIT_OK
    assert "skipped" in rep["results"]["control"]
    assert (out / "upsilon.csv").exists() and not (out / "control.csv").exists()


def test_verify_benchmark(tmp_path):
    code, rep, _ = run(tmp_path, "verify", "--spec", str(SPECS / "benchmark.json"))
    assert code == EXIT_OK and rep["results"]["all_passed"]
    table = rep["results"]["convergence"]
    assert [row["N"] for row in table] == [4, 8, 16]
    assert "u_err_vs_det" not in table[2]
    assert table[0]["cost_err"] > table[1]["cost_err"] > table[2]["cost_err"]


def test_verify_random(tmp_path):
    code, rep, _ = run(tmp_path, "verify", "--spec", str(SPECS / "random_a.json"), "--grid-list", "4,6,8,10")
    assert code == EXIT_OK
    assert all(c["passed"] for c in rep["checks"])


def test_verify_random_initial_state(tmp_path):
    code, rep, _ = run(tmp_path, "verify", "--spec", str(SPECS / "noisy_2x1.json"))
    assert code == EXIT_OK
    assert rep["results"]["convergence"].startswith("skipped")
    assert {c["name"] for c in rep["checks"]} >= {"reduction_P_plus_F_vs_P2", "squares_identity_moments_u0"}


def test_verify_reports_failures(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "tol_cs", lambda N: 0.0)
    code, rep, _ = run(tmp_path, "verify", "--spec", str(SPECS / "benchmark.json"), "--grid-list", "4")
    assert code == EXIT_CHECKS and rep["status"] == "checks-failed"
    failed = [c["name"] for c in rep["checks"] if not c["passed"]]
    assert "squares_identity_moments_u0" in failed


def test_evaluate(tmp_path):
    spec_path = str(SPECS / "benchmark.json")
    ctrl = tmp_path / "u.csv"
    t = np.arange(200) / 200
    ctrl.write_text("t,u_1\n" + "".join(f"{a},-0.5\n" for a in t))
    code, rep, _ = run(tmp_path, "evaluate", "--spec", spec_path, "--control", str(ctrl))
    assert code == EXIT_OK
    assert rep["results"]["moment_cost"] == pytest.approx(0.5, abs=1e-6)


def test_evaluate_needs_control(tmp_path):
    code, rep, _ = run(tmp_path, "evaluate", "--spec", str(SPECS / "benchmark.json"))
    assert code == EXIT_SPEC and rep["status"] == "invalid-spec"


def test_oracle_qp(tmp_path):
    code, rep, out = run(tmp_path, "oracle-qp", "--spec", str(SPECS / "random_a.json"), "--steps", "8")
    assert code == EXIT_OK
    res = rep["results"]
    assert res["qp_cost"] <= res["riccati_control_ensemble_cost"] + 1e-10
    assert (out / "qp_control.csv").exists()


def test_oracle_qp_lattice_engine(tmp_path):
    code, rep, _ = run(tmp_path, "oracle-qp", "--spec", str(SPECS / "random_a.json"), "--steps", "20")
    assert code == EXIT_OK and rep["results"]["qp_engine"] == "lattice"
    assert "max_abs_u_diff" not in rep["results"]


def test_oracle_qp_size_cap(tmp_path):
    code, rep, _ = run(tmp_path, "oracle-qp", "--spec", str(SPECS / "benchmark.json"), "--steps", "300")
    assert code == EXIT_SIZE and rep["status"] == "size-exceeded"


def test_simulate(tmp_path):
    code, rep, _ = run(tmp_path, "simulate", "--spec", str(SPECS / "noisy_2x1.json"), "--paths", "20000",
                       "--seed", "3")
    assert code == EXIT_OK
    res = rep["results"]
    assert abs(res["z_score"]) <= 4
    assert res["seed"] == 3 and res["paths"] == 20000


def test_simulate_noiseless_has_no_z_score(tmp_path):
    code, rep, _ = run(tmp_path, "simulate", "--spec", str(SPECS / "benchmark.json"), "--paths", "2000")
    assert code == EXIT_OK and rep["results"]["z_score"] is None
    assert abs(rep["results"]["gap"]) <= 1e-12


def test_reduce_check(tmp_path):
    code, rep, out = run(tmp_path, "reduce-check", "--spec", str(SPECS / "noisy_2x1.json"))
    assert code == EXIT_OK and rep["results"]["max_deviation"] <= 1e-6
    header, data = read_csv(out / "reduction.csv")
    assert header[0] == "t" and data.shape[0] == 101


def test_reduce_check_rejects_random(tmp_path):
    code, rep, _ = run(tmp_path, "reduce-check", "--spec", write_spec(tmp_path, random_a()))
    assert code == EXIT_SPEC


def test_invalid_spec(tmp_path):
    code, rep, _ = run(tmp_path, "solve-det", "--spec", write_spec(tmp_path, make_spec(0, 1, 0, 0, 0, -1, 1, 1)))
    assert code == EXIT_SPEC
    assert "R not PSD" in rep["error"]["message"]


def test_unreadable_spec(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    code, rep, _ = run(tmp_path, "solve-det", "--spec", str(bad))
    assert code == EXIT_SPEC


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence(tmp_path):
    spec = make_spec(400.0, 1, 0, 0, 1, 1, 1, 1, T=10.0, steps=4)
    code, rep, _ = run(tmp_path, "solve-det", "--spec", write_spec(tmp_path, spec))
    assert code == EXIT_DIVERGED and rep["status"] == "diverged"


def test_byte_identical_reruns(tmp_path):
    for name in ("a", "b"):
        assert main(["solve-det", "--spec", str(SPECS / "noisy_2x1.json"), "--out", str(tmp_path / name)]) == 0
    for f in ("control.csv", "riccati.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_report_numbers_finite(tmp_path):
    _, rep, _ = run(tmp_path, "verify", "--spec", write_spec(tmp_path, benchmark(50)))
    text = json.dumps(rep)
    assert "NaN" not in text and "Infinity" not in text


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["solve-det"])
    assert exc.value.code == 2
