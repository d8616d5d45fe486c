import json

import pytest

from cpsmon import scenario
from cpsmon.errors import ParseError

from helpers import TWO_SENSORS


def base(**over):
    d = {"name": "x", "horizon_ticks": 1000, "plant": {"sensors": TWO_SENSORS}}
    d.update(over)
    return d


@pytest.mark.parametrize("name", scenario.SHIPPED)
def test_shipped_scenarios_load(name):
    sc = scenario.load(name)
    assert sc.name == name and sc.horizon_ticks == 200000
    assert {s.id for s in sc.plant.sensors} == {"gps", "baro"}
    program, image = scenario.load_program(sc)
    assert image.digest == scenario.load_program(scenario.from_dict(base()))[1].digest


def test_defaults():
    sc = scenario.from_dict(base())
    assert sc.seed == 0 and sc.monitors.i2m.r_max == 5 and sc.monitors.i2m.retries == 3
    assert sc.monitors.hrim.baud_tolerance == 0.05
    assert sc.monitors.eim.failsafe_address == 0x08006168


def test_roundtrip():
    sc = scenario.load("return_tamper")
    again = scenario.from_dict(json.loads(json.dumps(sc.to_dict())), sc.base_dir)
    assert again == sc


def test_overrides():
    sc = scenario.load("nominal").with_overrides(seed=9, ticks=500)
    assert (sc.seed, sc.horizon_ticks) == (9, 500)


@pytest.mark.parametrize("data,field", [
    ({"horizon_ticks": 10, "plant": {"sensors": TWO_SENSORS}}, "name"),
    (base(horizon_ticks=0), "horizon_ticks"),
    (base(horizon_ticks="lots"), "horizon_ticks"),
    (base(plant={"sensors": []}), "plant.sensors"),
    (base(plant={"sensors": [{"id": "g", "kind": "lidar", "emit_period": 5}]}), "plant.sensors[0].kind"),
    (base(monitors={"i2m": {"r_max": 1}}), "monitors.i2m.r_max"),
    (base(monitors={"hrim": {"baud_tolerance": 0.5}}), "monitors.hrim.baud_tolerance"),
    (base(attacks=[{"kind": "uart_lockup", "target": "gps", "at_tick": 5000}]), "attacks[0].at_tick"),
    (base(attacks=[{"kind": "uart_lockup", "target": "lidar", "at_tick": 5}]), "attacks[0].target"),
    (base(attacks=[{"kind": "baud_change", "target": "gps", "at_tick": 5}]), "attacks[0].params"),
])
def test_parse_errors_name_the_field(data, field):
    with pytest.raises(ParseError) as e:
        scenario.from_dict(data)
    assert e.value.field == field


def test_json_syntax_error_has_line():
    with pytest.raises(ParseError) as e:
        scenario.loads('{\n "name": "x",\n oops\n}')
    assert e.value.line == 3


def test_missing_file():
    with pytest.raises(ParseError):
        scenario.load("/nonexistent/scenario.json")
