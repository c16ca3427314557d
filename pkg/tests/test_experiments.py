import json
from importlib import resources

import numpy as np
import pytest

from esdelay.core_model import problem_from_dict
from esdelay.errors import UnknownExample, UnknownTable
from esdelay.experiments import (
    EXAMPLES,
    TABLES,
    _round_like,
    example_document,
    reproduce_table,
    run_example,
    verify_trace,
)


def test_fixtures_match_examples():
    root = resources.files("esdelay") / "fixtures"
    names = sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))
    assert names == sorted(f"{k}.json" for k in EXAMPLES)
    for key, doc in EXAMPLES.items():
        assert json.loads((root / f"{key}.json").read_text()) == doc


@pytest.mark.parametrize("key", sorted(EXAMPLES))
def test_examples_validate(key):
    p = problem_from_dict(EXAMPLES[key])
    assert p.tuning.epsilon is not None and p.map.theta_star is not None


def test_unknown_ids():
    with pytest.raises(UnknownTable):
        reproduce_table("table9")
    with pytest.raises(UnknownExample):
        example_document("example9_9")


def test_table_id_forms():
    assert reproduce_table("5").table == reproduce_table("table5").table == "table5"


def test_rounding_to_printed_digits():
    assert _round_like(0.0060001, "0.006") == "0.006"
    assert _round_like(0.02474, "0.0247") == "0.0247"
    assert _round_like(0.02557, "0.026") == "0.026"


def test_table5_reproduces():
    rep = reproduce_table("table5")
    assert rep.passed
    assert any(c.passed is None for c in rep.cells)  # prior-work row kept as context


def test_table4_infeasible_row_detected():
    rep = reproduce_table("table4")
    cell = [c for c in rep.cells if c.cell == "feasibility"]
    assert len(cell) == 1 and cell[0].passed


def test_context_rows_have_no_problem():
    for spec in TABLES.values():
        for row in spec.rows:
            assert (row.doc is None) == row.context


def test_report_formats():
    rep = reproduce_table("table2")
    md = rep.to_markdown().splitlines()
    assert md[0] == "## table2" and md[2].startswith("| row |")
    rows = rep.to_csv().strip().splitlines()
    assert rows[0] == "table,row,cell,expected,computed,tolerance,status"
    assert len(rows) == len(rep.cells) + 1


@pytest.mark.parametrize("key", ["example3_1", "example3_2", "example4_1", "example4_2", "example4_3"])
def test_example_runs_pass(key):
    res = run_example(key)
    assert res.passed, res.summary


def test_verify_trace_flags_violation():
    res = run_example("example3_2")
    p = problem_from_dict(EXAMPLES["example3_2"])
    tr = res.trace
    bad = np.array(tr.vartheta_hat)
    bad[-1] += 1.0
    import dataclasses
    broken = dataclasses.replace(tr, vartheta_hat=bad)
    summary = verify_trace(p, broken)
    assert not summary["envelope_ok"]
