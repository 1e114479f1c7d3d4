import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from regime_stop import extraction as ex
from regime_stop.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, EXIT_VERIFY, main
from regime_stop.config import parse_config
from regime_stop.errors import ParseError, ValidationError

ROOT = Path(__file__).resolve().parents[1]
PAPER = ROOT / "configs" / "paper_example.json"
NEVER = ROOT / "configs" / "never_stop.json"
THREE = ROOT / "configs" / "three_regime_pde.json"


def paper_doc(**sections):
    doc = json.loads(PAPER.read_text())
    for k, v in sections.items():
        doc.setdefault(k, {}).update(v) if isinstance(v, dict) else doc.__setitem__(k, v)
    return doc


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


class TestParse:
    def test_shipped_examples(self):
        for path in (PAPER, ROOT / "examples" / "paper_example.json"):
            cfg = parse_config(path.read_text())
            assert cfg.model.mu1 == 0.01 and cfg.model.mu2 == 0.10 and cfg.model.K == 5

    def test_example_copy_is_identical(self):
        assert (ROOT / "examples" / "paper_example.json").read_text() == PAPER.read_text()

    def test_empty_document(self):
        with pytest.raises(ParseError):
            parse_config("")

    def test_syntax_error_position(self):
        with pytest.raises(ParseError) as info:
            parse_config('{\n  "model": {,}\n}')
        assert info.value.line == 2

    def test_negative_sigma(self):
        doc = paper_doc(model={"sigma1": -0.1})
        with pytest.raises(ValidationError, match=r"model\.sigma1"):
            parse_config(json.dumps(doc))

    def test_unknown_key_path(self):
        doc = paper_doc(solver={"nodes": 10})
        with pytest.raises(ValidationError, match=r"solver\.nodes"):
            parse_config(json.dumps(doc))

    def test_nan_rejected(self):
        text = PAPER.read_text().replace('"C": 20', '"C": NaN')
        with pytest.raises(ParseError):
            parse_config(text)

    def test_version_checked(self):
        with pytest.raises(ValidationError, match="version"):
            parse_config(json.dumps(paper_doc(version=2)))

    def test_model_or_problem(self):
        with pytest.raises(ValidationError):
            parse_config('{"version": 1}')
        doc = paper_doc(problem=json.loads(THREE.read_text())["problem"])
        with pytest.raises(ValidationError, match="problem"):
            parse_config(json.dumps(doc))

    def test_problem_only_for_pde(self):
        with pytest.raises(ValidationError, match="pde"):
            parse_config(THREE.read_text(), "solve")
        assert parse_config(THREE.read_text(), "pde").problem.build().m == 3

    def test_meta_echoes_defaults(self):
        meta = parse_config(PAPER.read_text(), "solve").meta()
        assert meta["solver"]["omega"] == 1.5 and meta["command"] == "solve"
        json.dumps(meta, allow_nan=False)

    @pytest.mark.parametrize("section,key,value", [
        ("solver", "n", 8), ("solver", "method", "sor"), ("solver", "tol", 0),
        ("mc", "n_paths", 1), ("mc", "start", [2]), ("mc", "seed", -1), ("mc", "p0", [0.0]),
        ("grid", "p_min", -1.0),
    ])
    def test_option_validation(self, section, key, value):
        with pytest.raises(ValidationError, match=rf"{section}\.{key}"):
            parse_config(json.dumps(paper_doc(**{section: {key: value}})))


class TestCommands:
    def test_classify(self, capsys):
        code, out, _ = run(capsys, "classify", str(PAPER))
        assert code == EXIT_OK and out.startswith("Threshold") and "x2=0.07227" in out

    def test_classify_never_stop(self, capsys):
        code, out, _ = run(capsys, "classify", "--config", str(NEVER))
        assert code == EXIT_OK and out.startswith("NeverStop")

    def test_roots_json(self, capsys):
        code, out, _ = run(capsys, "roots", str(PAPER), "--format", "json")
        d = json.loads(out)
        assert code == EXIT_OK and d["x2"] == pytest.approx(0.0723, abs=5e-4) and d["z1"] < d["z2"] < 0

    def test_solve_json_round_trip(self, capsys):
        code, out, err = run(capsys, "solve", str(PAPER))
        d = json.loads(out)
        assert code == EXIT_OK and d["case"] == "Case2"
        np.testing.assert_allclose(d["thresholds"], [2.08, 1.04], atol=0.005)
        back = ex.ClosedFormSolution.from_dict(d)
        assert back.to_dict() == {k: v for k, v in d.items() if k != "meta"}
        assert "Case2" in err

    def test_solve_writes_value_table(self, tmp_path, capsys):
        out = tmp_path / "sol.json"
        code, stdout, _ = run(capsys, "solve", str(PAPER), "--out", str(out), "--quiet")
        assert code == EXIT_OK and stdout == ""
        raw = (tmp_path / "sol_values.csv").read_bytes()
        assert b"\r\n" in raw
        rows = list(csv.reader(io.StringIO(raw.decode())))
        assert rows[0] == ["p", "J1", "J2", "stopped1", "stopped2"]
        assert len(rows) == 201
        p = np.array([float(r[0]) for r in rows[1:]])
        assert np.all(np.diff(p) > 0)
        # machine output round-trips floats exactly
        sol = ex.solve(parse_config(PAPER.read_text()).model)
        assert float(rows[50][1]) == ex.evaluate_value(sol, 0, p[49])

    def test_solve_csv_to_stdout(self, capsys):
        code, out, _ = run(capsys, "solve", str(PAPER), "--format", "csv")
        assert code == EXIT_OK and out.splitlines()[0] == "p,J1,J2,stopped1,stopped2"

    def test_pde_csv_and_intervals(self, tmp_path, capsys):
        doc = paper_doc(solver={"n": 500})
        out = tmp_path / "grid.csv"
        code, _, err = run(capsys, "pde", write(tmp_path, doc), "--out", str(out))
        assert code == EXIT_OK
        rows = list(csv.reader(io.StringIO(out.read_text())))
        assert rows[0] == ["y", "V1", "V2", "stopped1", "stopped2"] and len(rows) == 501
        iv = json.loads((tmp_path / "grid_intervals.json").read_text())
        assert all(s["connected"] and s["left_form"] for s in iv["stopping_sets"])
        assert "regime 1" in err

    def test_pde_three_regimes(self, capsys):
        code, out, _ = run(capsys, "pde", str(THREE), "--format", "json")
        d = json.loads(out)
        assert code == EXIT_OK and len(d["thresholds"]) == 3 and d["residual"] <= 1e-8

    def test_simulate(self, tmp_path, capsys):
        doc = paper_doc(mc={"n_paths": 2000, "p0": [10.0], "start": [0]})
        code, out, _ = run(capsys, "simulate", write(tmp_path, doc), "--seed", "7")
        d = json.loads(out)
        (e,) = d["estimates"]
        assert code == EXIT_OK and d["meta"]["mc"]["seed"] == 7
        assert abs(e["mean"] - e["closed_form"]) <= 3 * e["stderr"] + e["truncation_bias_bound"]

    def test_simulate_reproducible_csv(self, tmp_path, capsys):
        doc = paper_doc(mc={"n_paths": 1000, "p0": [5.0], "start": [0, 1]})
        path = write(tmp_path, doc)
        a = run(capsys, "simulate", path, "--format", "csv")[1]
        b = run(capsys, "simulate", path, "--format", "csv")[1]
        assert a == b and a.splitlines()[0].startswith("p0,start,mean")

    def test_plot_q_brackets_roots(self, capsys):
        code, out, _ = run(capsys, "plot-q", str(PAPER))
        rows = list(csv.reader(io.StringIO(out)))[1:]
        z = np.array([float(r[0]) for r in rows])
        q = np.array([float(r[1]) for r in rows])
        assert code == EXIT_OK and np.count_nonzero(np.diff(np.sign(q))) == 4
        zs = ex.quartic_roots(parse_config(PAPER.read_text()).model)
        assert z[0] < zs.z1 and z[-1] > zs.z4

    def test_verify_small(self, tmp_path, capsys):
        doc = paper_doc(mc={"n_paths": 4000, "p0": [1.5, 10.0]})
        code, out, _ = run(capsys, "verify", write(tmp_path, doc))
        assert code == EXIT_OK and out.rstrip().endswith("all checks passed")
        assert "FAIL" not in out

    def test_verify_failure_exit_code(self, tmp_path, capsys):
        # a deliberately wrong policy must fail the Monte Carlo checks
        doc = paper_doc(mc={"n_paths": 4000, "p0": [3.0], "start": [0], "thresholds": [5.0, 5.0]})
        code, out, _ = run(capsys, "verify", write(tmp_path, doc))
        assert code == EXIT_VERIFY and "FAIL" in out

    def test_infinite_value_simulate_is_solver_error(self, tmp_path, capsys):
        doc = paper_doc(model={"r": 0.05})
        code, _, err = run(capsys, "simulate", write(tmp_path, doc))
        assert code == EXIT_SOLVER and "infinite" in err

    def test_config_errors(self, tmp_path, capsys):
        assert run(capsys, "solve")[0] == EXIT_CONFIG
        assert run(capsys, "solve", str(tmp_path / "missing.json"))[0] == EXIT_CONFIG
        empty = tmp_path / "empty.json"
        empty.write_text("")
        code, out, err = run(capsys, "solve", str(empty))
        assert code == EXIT_CONFIG and out == "" and "config error" in err
        assert run(capsys, "bogus", str(PAPER))[0] == EXIT_CONFIG
        assert run(capsys, "simulate", str(PAPER), "--seed", "-3")[0] == EXIT_CONFIG


def test_verify_shipped_example(capsys):
    code, out, _ = run(capsys, "verify", str(ROOT / "examples" / "paper_example.json"))
    assert code == EXIT_OK, out
    assert out.rstrip().endswith("all checks passed")
