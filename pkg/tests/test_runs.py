import json

import pytest
from hypothesis import given, strategies as st

from moescale.errors import RunLoadError
from moescale.runs import (
    COLUMNS,
    DEFAULT_BUDGETS,
    RunRecord,
    RunTable,
    group_by_budget,
    load_runs,
    split_holdout_by_sparsity,
    write_runs_csv,
)

HEADER = ",".join(COLUMNS)


def _row(i, s=0.5, compute=None, na=1e8, tokens=1e10):
    compute = 6 * na * tokens if compute is None else compute
    return f"r{i},{2 * na},{na},{s},{tokens},{compute},2.5"


def _write(tmp_path, lines, name="runs.csv"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_loads_three_rows(tmp_path):
    t = load_runs(_write(tmp_path, [HEADER, _row(1), _row(2), _row(3)]))
    assert len(t) == 3 and t.run_ids() == ["r1", "r2", "r3"]
    assert t.warnings == ()


def test_sparsity_one_rejected_with_row_and_column(tmp_path):
    with pytest.raises(RunLoadError, match=r"row 2, column 'sparsity'"):
        load_runs(_write(tmp_path, [HEADER, _row(1), _row(2, s=1.0)]))


def test_compute_deviation_warns(tmp_path):
    t = load_runs(_write(tmp_path, [HEADER, _row(1, compute=6e18 * 1.5)]))
    assert len(t) == 1 and len(t.warnings) == 1 and "row 1" in t.warnings[0]


def test_missing_column(tmp_path):
    with pytest.raises(RunLoadError, match="loss"):
        load_runs(_write(tmp_path, ["run_id,n_total,n_active,sparsity,tokens,compute", "a,2,1,0,1,6"]))


def test_non_numeric_cell(tmp_path):
    with pytest.raises(RunLoadError, match=r"row 1, column 'tokens'"):
        load_runs(_write(tmp_path, [HEADER, "a,2,1,0,lots,6,2.5"]))


def test_duplicate_run_id(tmp_path):
    with pytest.raises(RunLoadError, match="duplicate"):
        load_runs(_write(tmp_path, [HEADER, _row(1), _row(1)]))


def test_missing_compute_is_synthesised(tmp_path):
    hdr = "run_id,n_total,n_active,sparsity,tokens,loss,lr"
    t = load_runs(_write(tmp_path, [hdr, "a,2e8,1e8,0.5,1e10,2.5,3e-4"]))
    r = t[0]
    assert r.compute == 6e18 and r.compute_synthetic and r.extras == {"lr": 3e-4}


def test_json_mirror(tmp_path):
    rec = {"run_id": "a", "n_total": 2e8, "n_active": 1e8, "sparsity": 0.5, "tokens": 1e10, "compute": 6e18, "loss": 2.5}
    p = tmp_path / "runs.json"
    p.write_text(json.dumps({"records": [rec]}))
    assert load_runs(p)[0].loss == 2.5
    p.write_text(json.dumps([rec]))
    assert len(load_runs(p)) == 1


def test_missing_file(tmp_path):
    with pytest.raises(RunLoadError, match="nope.csv"):
        load_runs(tmp_path / "nope.csv")


def test_deterministic_and_round_trip(tmp_path):
    p = _write(tmp_path, [HEADER, _row(1), _row(2, s=0.25)])
    a, b = load_runs(p), load_runs(p)
    assert a.records == b.records
    out = tmp_path / "out.csv"
    write_runs_csv(a, out)
    assert load_runs(out).records == a.records


def _rec(i, compute, s=0.0):
    return RunRecord(f"r{i}", 1e9, 1e9, s, compute / 6e9, compute, 2.0)


def test_group_examples():
    t = RunTable((_rec(1, 3.05e19), _rec(2, 4.5e19)))
    g = group_by_budget(t, 0.05)
    assert [(c, len(tab)) for c, tab in g.groups] == [(3e19, 1)]
    assert g.unassigned.run_ids() == ["r2"]
    g = group_by_budget(RunTable((_rec(1, 1.09e18),)), 0.1, centers=[1e18])
    assert g.groups[0][0] == 1e18


def test_group_bad_tolerance():
    with pytest.raises(ValueError):
        group_by_budget(RunTable(()), 0.5)


@given(st.lists(st.floats(1e19, 2e21), max_size=40), st.floats(0.01, 0.49))
def test_group_partition(computes, tol):
    t = RunTable(tuple(_rec(i, c) for i, c in enumerate(computes)))
    g = group_by_budget(t, tol)
    ids = [i for _, tab in g.groups for i in tab.run_ids()] + g.unassigned.run_ids()
    assert sorted(ids) == sorted(t.run_ids())
    assert [c for c, _ in g.groups] == sorted(c for c, _ in g.groups)
    assert all(c in DEFAULT_BUDGETS for c, _ in g.groups)


def test_holdout_examples():
    t = RunTable(tuple(_rec(i, 1e20, s) for i, s in enumerate([0.0, 0.5, 0.98, 0.98])))
    fit, hold = split_holdout_by_sparsity(t, 0.98)
    assert hold.run_ids() == ["r2", "r3"] and fit.run_ids() == ["r0", "r1"]
    fit, hold = split_holdout_by_sparsity(t, 0.97)
    assert len(hold) == 0 and len(fit) == 4


@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.98]), max_size=30), st.sampled_from([0.0, 0.5, 0.98, 0.3]))
def test_holdout_partition(sparsities, h):
    t = RunTable(tuple(_rec(i, 1e20, s) for i, s in enumerate(sparsities)))
    fit, hold = split_holdout_by_sparsity(t, h)
    assert sorted(fit.run_ids() + hold.run_ids()) == sorted(t.run_ids())
    assert not set(fit.run_ids()) & set(hold.run_ids())
