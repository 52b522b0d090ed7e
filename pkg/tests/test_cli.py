import json
import subprocess
import sys

import jsonschema
import pytest

from greenlab import cli

SMALL = {
    "name": "small",
    "seed": 3,
    "grid": {"dims": 25, "h": 0.0625},
    "coefficients": {"case": "case2", "V": {"kind": "constant", "value": 1.0}},
    "solver": {"rel_tol": 1e-10},
    "sources": [{"y": [0.0, 0.0, 0.0]}],
    "suites": ["coercivity", "symmetry", "caccioppoli"],
}


def write(tmp_path, doc, name="s.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run(tmp_path, doc, *extra, out="out"):
    return cli.main(["run", str(write(tmp_path, doc)), "--out", str(tmp_path / out), *extra])


def load_report(path):
    doc = json.loads((path / "report.json").read_text())
    doc.pop("timestamp")
    doc["environment"].pop("threads")
    return doc


def test_shipped_scenario_validates():
    doc = json.loads(cli.shipped_scenario().read_text())
    cli.validate_scenario(doc)
    jsonschema.Draft202012Validator(cli.SCHEMA).validate(doc)
    assert "green-decay" in doc["suites"]


@pytest.mark.slow
def test_shipped_scenario_runs(tmp_path):
    assert cli.main(["run", str(cli.shipped_scenario()), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    decay = {s["name"]: s for s in rep["suites"]}["green-decay"]
    ids = [c["id"] for c in decay["checks"]]
    assert any(i.startswith("decay") for i in ids)
    assert (tmp_path / "green-decay.csv").read_text().startswith("source,r_in,r_out,shell_sup")


def test_empty_suite_list(tmp_path):
    assert run(tmp_path, {**SMALL, "suites": []}) == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["suites"] == [] and rep["version"] == cli.REPORT_VERSION
    assert {"greenlab", "python", "numpy", "scipy", "platform", "threads"} <= set(rep["environment"])


def test_small_scenario_passes_and_writes_csv(tmp_path):
    assert run(tmp_path, SMALL) == 0
    out = tmp_path / "out"
    rep = json.loads((out / "report.json").read_text())
    assert [s["name"] for s in rep["suites"]] == ["caccioppoli", "coercivity", "symmetry"]
    assert (out / "coercivity.csv").read_text().splitlines()[0] == "quantity,value"
    assert (out / "symmetry.csv").read_text().splitlines()[0] == "x,y,relative_difference"
    assert (out / "caccioppoli.csv").read_text().splitlines()[0] == "r,R,lhs,rhs_energy,rhs_source,ratio"


def test_deterministic_across_threads(tmp_path, monkeypatch):
    assert run(tmp_path, SMALL, "--threads", "1", out="a") == 0
    monkeypatch.setenv("GREENLAB_THREADS", "3")
    assert run(tmp_path, SMALL, out="b") == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert json.loads((b / "report.json").read_text())["environment"]["threads"] == 3
    assert load_report(a) == load_report(b)
    for name in ("coercivity.csv", "symmetry.csv", "caccioppoli.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_override_changes_hash(tmp_path):
    assert run(tmp_path, {**SMALL, "suites": []}, out="a") == 0
    assert run(tmp_path, {**SMALL, "suites": []}, "--seed", "11", out="b") == 0
    ha = json.loads((tmp_path / "a" / "report.json").read_text())["scenario-hash"]
    hb = json.loads((tmp_path / "b" / "report.json").read_text())["scenario-hash"]
    assert ha != hb and ha == cli.scenario_hash({**SMALL, "suites": []})


def test_failing_check_exits_one(tmp_path):
    doc = {**SMALL, "coefficients": {"case": "case2", "coercivity": "none",
                                     "V": {"kind": "constant", "value": -40.0}},
           "suites": ["coercivity"]}
    assert run(tmp_path, doc) == 1
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert any(c["verdict"] == "fail" for c in rep["suites"][0]["checks"])


def test_prerequisite_violation_exits_two(tmp_path, capsys):
    doc = {**SMALL, "coefficients": {"case": "case1"}, "suites": ["agmon"]}
    assert run(tmp_path, doc) == 2
    assert "case3" in capsys.readouterr().err


def test_schema_error_reports_pointer(tmp_path, capsys):
    doc = {**SMALL, "solver": {"rel_tol": 0.1}}
    assert run(tmp_path, doc) == 2
    assert "/solver/rel_tol" in capsys.readouterr().err
    assert run(tmp_path, {**SMALL, "suites": ["nonsense"]}) == 2


def test_unreadable_and_unwritable(tmp_path):
    assert cli.main(["run", str(tmp_path / "missing.json")]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["run", str(write(tmp_path, SMALL)), "--out", str(blocker / "sub")]) == 2


def test_m_of_x(capsys):
    assert cli.main(["m-of-x", "--potential", "constant", "--point", "0,0,0", "--params", '{"value": 4}']) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["m"] == pytest.approx(2 * (4 * 3.141592653589793 / 3) ** 0.5, rel=1e-6)
    assert out["psi_residual"] <= 1e-6


def test_agmon_subcommand(capsys):
    args = ["agmon", "--potential", "constant", "--from", "0,0,0", "--to", "1,0,0", "--params", '{"value": 1}']
    assert cli.main(args) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["d"] == pytest.approx((4 * 3.141592653589793 / 3) ** 0.5, rel=0.02)


def test_schema_subcommand(capsys):
    assert cli.main(["schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    jsonschema.Draft202012Validator.check_schema(schema)
    assert schema["required"] == ["grid", "coefficients"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "greenlab.cli", "schema"], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["title"] == "greenlab scenario"
