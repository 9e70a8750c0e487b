import csv
import json
import warnings

import pytest

from mlbsde.cli import main
from mlbsde.config import parse_config
from mlbsde.experiments import compare, convergence_lines, execute, resolve_plan, write_artifacts

SINE = """\
name: tiny-sine
problem: {name: sine, params: {C_phi: 1.0, C_x: 1.0}}
schemes: [ml, mdp, mdp2]
grid: {k_min: 1, k_max: 3}
bases: [{kind: hermite, degree: 3}]
schedule: {kind: sine, factor: 4}
seeds: [0, 1]
n_eval: 2000
"""

GOODDEAL = """\
name: tiny-gooddeal
problem: gooddeal
schemes: [split-ml, mdp]
grid: {k_min: 1, k_max: 2}
bases: [{kind: equiprobable, cells_per_axis: 4, probe_size: 20000}]
schedule: {kind: constant, M: 3000}
n_eval: 2000
"""


@pytest.fixture(scope="module")
def sine_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("sine")
    cfg = parse_config(SINE)
    res = execute(cfg)
    paths = write_artifacts(res, out, cfg)
    return cfg, res, paths


def test_artifacts(sine_run):
    cfg, res, paths = sine_run
    assert {r.scheme for r in res.reports} == {"ML", "MDP1", "MDP2"}
    assert len(res.reports) == 3 * 3 * 2
    for p in paths.values():
        assert p.exists()
    plan = json.loads(paths["plan"].read_text())
    assert plan["plan_hash"] == res.plan["plan_hash"]
    lines = paths["convergence"].read_text().splitlines()
    assert lines[0] == f"# plan_hash: {plan['plan_hash']}"
    rows = list(csv.DictReader(lines[2:]))
    assert {r["scheme"] for r in rows} == {"ML", "MDP1", "MDP2"}
    assert set(convergence_lines(res)) == {("ML", "hermite"), ("MDP1", "hermite"), ("MDP2", "hermite")}
    for r in res.reports:
        assert r.provenance["plan_hash"] == plan["plan_hash"] and r.provenance["cost"] > 0


def test_execute_deterministic(sine_run):
    cfg, res, _ = sine_run
    again = execute(cfg.model_copy(update={"threads": 2}))
    for a, b in zip(res.reports, again.reports):
        assert a.scheme == b.scheme and (a.mse_y == b.mse_y).all() and (a.mse_z == b.mse_z).all()


def test_compare_identical(sine_run):
    _, _, paths = sine_run
    rows = compare(paths["errors_json"], paths["errors_json"], "ML", "ML")
    assert [r["k"] for r in rows] == [1, 2, 3]
    assert all(r["ratioY"] == 1.0 and r["ratioZ"] == 1.0 and r["cost_ratio"] == 1.0 for r in rows)
    rows = compare(paths["errors_json"], paths["errors_json"], "ML", "MDP2")
    assert rows[-1]["cost_a"] < rows[-1]["cost_b"]
    with pytest.raises(ValueError, match="choose one"):
        compare(paths["errors_json"], paths["errors_json"])


def test_gooddeal_pipeline(tmp_path):
    cfg = parse_config(GOODDEAL)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = execute(cfg)
    assert res.oracle["verified"]
    assert {r.scheme for r in res.reports} == {"SPLIT", "MDP"}
    assert all(r.provenance["oracle_verified"] for r in res.reports)
    write_artifacts(res, tmp_path, cfg)
    sine = tmp_path / "sine"
    (tmp_path / "s.yaml").write_text(SINE.replace("k_max: 3", "k_max: 1").replace("[ml, mdp, mdp2]", "[ml]"))
    assert main(["run", "--config", str(tmp_path / "s.yaml"), "--out", str(sine)]) == 0
    with pytest.raises(ValueError, match="different problems"):
        compare(tmp_path / "errors.json", sine / "errors.json", "SPLIT", "ML")


def test_cli_run_compare_calibrate(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SINE.replace("k_max: 3", "k_max: 2"))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--seed", "5", "--threads", "2"]) == 0
    printed = capsys.readouterr().out
    plan = json.loads(printed[: printed.rindex("}") + 1])
    assert plan["seeds"] == [5] and plan["threads"] == 2
    assert (out / "errors.csv").exists() and (out / "table.csv").exists()
    assert main(["compare", str(out / "errors.json"), str(out / "errors.json"), "--scheme-a", "ML", "--scheme-b", "MDP1", "--out", str(out)]) == 0
    assert (out / "compare.csv").exists()
    assert main(["calibrate", "--epsilon", "0.05", "--k", "3", "--dim", "2", "--out", str(out)]) == 0
    assert json.loads((out / "schedule.json").read_text())["k_final"] == 3
    assert main(["run", "--preset", "table-multid", "--dry-run", "--out", str(tmp_path / "dry")]) == 0


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SINE + "unknown: 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "bad.yaml:9: unknown" in capsys.readouterr().err
    assert main(["run", "--out", str(tmp_path)]) == 2
    assert main(["run", "--preset", "table-multid", "--mem-budget", "100000", "--out", str(tmp_path)]) == 4
    assert "level 1" in capsys.readouterr().err


def test_cli_oracle_build(tmp_path, capsys):
    assert main(["oracle-build", "--out", str(tmp_path), "--n-x", "601", "--n-tau", "300"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["verified"] and (tmp_path / "gooddeal_table.csv").exists()


def test_plan_echo_matches(sine_run):
    cfg, res, _ = sine_run
    assert resolve_plan(cfg)["plan_hash"] == res.plan["plan_hash"]
