import numpy as np
import pytest

from lvrtadapt.cpflow import trace
from lvrtadapt.grid import case_from_dict
from lvrtadapt.oracle import MAX_SUBSET, OracleGuardError, brute_force, oracle_table_text

from conftest import two_bus_dict


@pytest.fixture(scope="module")
def table(case9):
    return brute_force(case9, 1.7)


def test_full_enumeration_has_64_rows(table):
    assert table.traces == 64
    assert [r.mask for r in table.rows] == sorted(r.mask for r in table.rows)
    assert len({r.mask for r in table.rows}) == 64


def test_empty_mask_row_is_the_plain_trace(case9, table):
    assert table.row((0,) * 6).lm == trace(case9).load_margin


@pytest.mark.parametrize("mask", [(0, 0, 0, 0, 0, 1), (1, 0, 1, 0, 1, 0), (1, 1, 1, 1, 1, 1)])
def test_rows_match_direct_traces(case9, table, mask):
    assert table.row(mask).lm == trace(case9, np.array(mask)).load_margin


def test_infeasible_rows_have_no_adjustment(table):
    for r in table.rows:
        assert r.feasible == (r.lm >= 1.7)
        if not r.feasible:
            assert r.sum_adjustment == 0


def test_optimum_is_minimum_total_then_fewest_blocked(table):
    best = table.optimum
    feasible = [r for r in table.rows if r.feasible]
    assert best.sum_adjustment <= min(r.sum_adjustment for r in feasible) + 1e-6
    ties = [r for r in feasible if abs(r.sum_adjustment - best.sum_adjustment) < 1e-6]
    assert best.blocked == min(r.blocked for r in ties)


def test_subset_of_four_gives_sixteen_rows(case9):
    t = brute_force(case9, 1.7, subset=[4, 5, 7, 9])
    assert t.traces == 16
    for r in t.rows:
        assert r.mask[case9.rg_index(6)] == 0 and r.mask[case9.rg_index(8)] == 0


def test_guard_refuses_large_subsets():
    d = two_bus_dict()
    d["rg_units"] = [{"id": i, "bus": 2, "p_output": 0.001, "c_lvrt_original": 0.5}
                     for i in range(1, MAX_SUBSET + 2)]
    with pytest.raises(OracleGuardError):
        brute_force(case_from_dict(d), 1.0)


def test_table_text_is_deterministic(case9, table):
    text = oracle_table_text(table)
    assert text == oracle_table_text(brute_force(case9, 1.7))
    lines = text.splitlines()
    assert len(lines) == 65
    assert lines[0].startswith("mask,lm,terminal,feasible,sum_adjustment")


def test_parallel_enumeration_matches_serial(case9, table):
    par = brute_force(case9, 1.7, subset=[5, 9], jobs=2)
    for r in par.rows:
        assert r == table.row(r.mask)
