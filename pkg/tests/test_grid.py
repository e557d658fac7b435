import copy
import io
import json

import numpy as np
import pytest

from lvrtadapt.grid import (CaseParseError, CaseValidationError, build_admittance, bundled_case_text,
                            case_from_dict, case_to_dict, emit_case, load_case, load_case_file)

from conftest import two_bus_dict


def test_bundled_case_shape(case9):
    assert case9.n_bus == 9
    assert case9.n_rg == 6
    assert sorted(u.bus for u in case9.rg_units) == [4, 5, 6, 7, 8, 9]
    assert case9.buses[case9.slack_index].id == 1
    assert {g.bus for g in case9.generators} == {1, 2, 3}


def test_emit_is_byte_identical_round_trip(case9):
    text = bundled_case_text()
    assert emit_case(case9) == text
    assert emit_case(load_case(emit_case(case9))) == text


def test_load_accepts_bytes_and_streams(tmp_path, case9):
    text = emit_case(case9)
    assert load_case(text.encode()) == case9
    assert load_case(io.StringIO(text)) == case9
    p = tmp_path / "c.json"
    p.write_text(text)
    assert load_case_file(p) == case9


def test_malformed_text_is_a_parse_error():
    with pytest.raises(CaseParseError):
        load_case("{not json")


def _invalid(mutate):
    d = two_bus_dict(rg_p=0.1, c=0.8)
    mutate(d)
    with pytest.raises(CaseValidationError) as info:
        case_from_dict(d)
    return str(info.value)


def test_duplicated_bus_id_names_the_bus():
    def dup(d):
        b = copy.deepcopy(d["buses"][1])
        d["buses"].append(b)
    assert "bus 2: duplicated bus id" in _invalid(dup)


@pytest.mark.parametrize("mutate, fragment", [
    (lambda d: d["buses"][0].update(kind="pq"), "exactly one slack"),
    (lambda d: d["branches"][0].update(to_bus=7), "endpoint bus does not exist"),
    (lambda d: d["branches"][0].update(x=0.0), "zero impedance"),
    (lambda d: d["generators"][0].update(q_min=5.0, q_max=1.0), "q_min > q_max"),
    (lambda d: d["rg_units"][0].update(c_lvrt_original=1.2), "c_lvrt_original"),
    (lambda d: d["rg_units"][0].update(p_output=-0.1), "p_output"),
    (lambda d: d["growth"].clear(), "growth"),
    (lambda d: d["growth"][0].update(p=0.0, q=0.0), "nonzero"),
])
def test_validation_rules(mutate, fragment):
    assert fragment in _invalid(mutate)


def test_all_violations_are_reported_together():
    def two_faults(d):
        d["branches"][0]["x"] = 0.0
        d["rg_units"][0]["c_lvrt_original"] = 2.0
    msg = _invalid(two_faults)
    assert "zero impedance" in msg and "c_lvrt_original" in msg


def test_disconnected_network_rejected():
    def island(d):
        d["buses"].append({"id": 3, "kind": "pq", "base_load_p": 0.0, "base_load_q": 0.0,
                           "shunt_g": 0.0, "shunt_b": 0.0, "v_setpoint": None})
    assert "not connected" in _invalid(island)


def test_unknown_section_rejected():
    d = two_bus_dict()
    d["extra"] = []
    with pytest.raises(CaseParseError):
        case_from_dict(d)


def test_admittance_two_bus_with_charging():
    case = case_from_dict(two_bus_dict(x=0.2, b_charging=0.04))
    Y = build_admittance(case)
    y = 1 / 0.2j
    expected = np.array([[y + 0.02j, -y], [-y, y + 0.02j]])
    np.testing.assert_allclose(Y, expected, atol=1e-14)


def test_admittance_is_symmetric_without_phase_shift(case9):
    Y = build_admittance(case9)
    np.testing.assert_allclose(Y, Y.T, atol=1e-14)
    # every row of the series part sums to minus the shunt terms
    assert np.all(np.abs(Y.sum(axis=1).real) < 1e-12)


def test_with_rg_settings_and_without_rg(case9):
    changed = case9.with_rg_settings({9: 0.7})
    assert changed.rg_units[changed.rg_index(9)].c_lvrt_original == 0.7
    assert case9.rg_units[case9.rg_index(9)].c_lvrt_original != 0.7
    smaller = case9.without_rg(9)
    assert 9 not in smaller.rg_ids and smaller.n_rg == 5


def test_case_dict_round_trip(case9):
    assert case_from_dict(json.loads(json.dumps(case_to_dict(case9)))) == case9
