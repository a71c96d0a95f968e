import json

import pytest

from moescale.cli import main
from moescale.runs import load_runs

CFG = {"n_layers": 4, "d_model": 512, "n_heads": 8, "d_head": 64, "e_total": 8, "e_active": 2}
SMALL_GRID = {
    "log_a": [5.0, 10.0], "log_b": [5.0, 10.0], "log_c": [0.0], "log_d": [0.0, 5.0], "log_e": [0.0],
    "alpha": [0.5], "beta": [0.5], "gamma": [0.25], "lambda_exp": [0.0], "delta_exp": [0.0],
}


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.json").write_text(json.dumps(CFG))
    (tmp_path / "truth.json").write_text(json.dumps({"a": 16612.5, "b": 5455.67, "c": 0.4598, "d": 17.26, "e": 0.94, "alpha": 0.5962, "beta": 0.3954, "gamma": 0.1595, "lambda": -0.1666, "delta_exp": 0.1603}))
    (tmp_path / "design.json").write_text(json.dumps({"budgets": [1e20, 1e21], "sparsities": [0, 0.5, 0.9], "sizes_per_cell": 8}))
    (tmp_path / "grid.json").write_text(json.dumps(SMALL_GRID))
    return tmp_path


def test_flops(work, capsys):
    assert main(["flops", "--config", "cfg.json", "--breakdown", "--json", "f.json"]) == 0
    out = capsys.readouterr().out
    assert "130695168" in out and "55197696" in out
    data = json.loads((work / "f.json").read_text())
    assert data["n_total"] == 130_695_168 and "breakdown" in data


def test_missing_config_exit_1(work, capsys):
    assert main(["flops", "--config", "nope.json"]) == 1
    err = capsys.readouterr().err
    assert "nope.json" in err and err.startswith("moescale: error[")


def test_invalid_config_exit_1(work, capsys):
    (work / "bad.json").write_text(json.dumps({**CFG, "e_active": 9}))
    assert main(["flops", "--config", "bad.json"]) == 1
    assert "error[invalid-config]" in capsys.readouterr().err


def test_usage_errors_exit_2(work, capsys):
    assert main(["flops"]) == 2
    assert main(["bogus"]) == 2
    assert main(["validate", "--out", "v", "--criteria", "42"]) == 2


def test_env_default(work, monkeypatch, capsys):
    monkeypatch.setenv("MOESCALE_THREADS", "zero")
    assert main(["flops", "--config", "cfg.json"]) == 2


def test_pipeline(work, capsys):
    assert main(["synth", "--truth", "truth.json", "--design", "design.json", "--out", "runs.csv", "--seed", "1", "--bundle", "b.json"]) == 0
    t = load_runs(work / "runs.csv")
    assert len(t) == 48
    bundle = json.loads((work / "b.json").read_text())
    assert bundle["command"] == "synth" and "truth.json" in bundle["inputs"]

    assert main(["fit-surface", "--runs", "runs.csv", "--budget", "1e20", "--grid-search", "--out", "surf.json", "--grid-out", "g.csv"]) == 0
    surf = json.loads((work / "surf.json").read_text())
    assert surf["kind"] == "isoflop_surface" and surf["budget"] == 1e20

    assert main(["fit-law", "--runs", "runs.csv", "--grid", "grid.json", "--holdout-sparsity", "0.9", "--out", "law.json"]) == 0
    law = json.loads((work / "law.json").read_text())
    assert law["starts_evaluated"] == 8 and law["holdout_metrics"]["n_records"] == 16

    capsys.readouterr()
    assert main(["frontier", "--fit", "surf.json", "--fix-sparsity", "0.5", "--out", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["constraint"] == "fixed_sparsity" and rows[0]["opt_size"] > 0
    assert main(["frontier", "--fit", "surf.json", "--map", "--sizes", "1e9,1e10", "--out", "csv", "--output", "map.csv"]) == 0
    assert (work / "map.csv").read_text().count("\n") == 3
    assert main(["frontier", "--fit", "law.json", "--budget", "1e21", "--fix-sparsity", "0.5", "--out", "json"]) == 0
    assert json.loads(capsys.readouterr().out)[0]["source"] == "scaling_law"
    assert main(["frontier", "--fit", "law.json", "--fix-sparsity", "0.5"]) == 2

    assert main(["report", "--fit", "law.json", "--fit", "surf.json", "--out", "csv", "--output", "r1.csv"]) == 0
    assert main(["report", "--fit", "surf.json", "--fit", "law.json", "--out", "csv", "--output", "r2.csv"]) == 0
    assert (work / "r1.csv").read_bytes() == (work / "r2.csv").read_bytes()


def test_synth_seed_changes_output(work):
    main(["synth", "--truth", "truth.json", "--design", "design.json", "--out", "a.csv", "--seed", "1"])
    main(["synth", "--truth", "truth.json", "--design", "design.json", "--out", "b.csv", "--seed", "1"])
    assert (work / "a.csv").read_bytes() == (work / "b.csv").read_bytes()


def test_fit_surface_empty_bucket(work, capsys):
    main(["synth", "--truth", "truth.json", "--design", "design.json", "--out", "runs.csv"])
    assert main(["fit-surface", "--runs", "runs.csv", "--budget", "3e19", "--degrees", "2,2,2", "--out", "s.json"]) == 1


def test_validate_repeat(work, capsys):
    assert main(["validate", "--out", "v", "--criteria", "4,8", "--repeat"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == [
        "[PASS] criterion 4: " + out[0].split(": ", 1)[1],
        "[PASS] criterion 8: " + out[1].split(": ", 1)[1],
        "[PASS] criterion 9: determinism of validate artifacts",
    ]
    assert (work / "v" / "summary.json").exists()
