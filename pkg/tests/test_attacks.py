import pytest

from cpsmon import scenario
from cpsmon.attacks import ATTACK_TABLE, AttackSpec, InjectionLog, apply, ground_truth
from cpsmon.errors import UnknownTarget

from helpers import make_plant, make_scenario, run_plant

LAYER_MONITOR = {"hardware": "hrim", "information": "i2m", "execution": "eim"}


def test_each_kind_has_one_layer_and_its_monitor():
    assert len(ATTACK_TABLE) == 6
    for a in ATTACK_TABLE.values():
        assert LAYER_MONITOR[a.layer] == a.monitor


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("baud_change", "gps", 10)
    with pytest.raises(ValueError):
        AttackSpec("teleport", "gps", 10)
    with pytest.raises(ValueError):
        AttackSpec("uart_lockup", "gps", -1)


def test_apply_baud_change_measured_period():
    plant = make_plant()
    run_plant(plant, 5000)
    apply(plant, AttackSpec("baud_change", "gps", 5000, {"new_baud": 115200}), 5000)
    run_plant(plant, 21000 + 90)
    assert plant.measure_bit_period("gps") == 9


def test_apply_lockup_silences_hrim_tap():
    plant = make_plant()
    run_plant(plant, 1100)
    apply(plant, AttackSpec("uart_lockup", "gps", 1100), 1100)
    assert plant.hrim_bus("gps") is None


def test_apply_checks_tick_and_target():
    plant = make_plant()
    with pytest.raises(ValueError):
        apply(plant, AttackSpec("uart_lockup", "gps", 5), 4)
    with pytest.raises(UnknownTarget):
        apply(plant, AttackSpec("uart_lockup", "lidar", 0), 0)
    with pytest.raises(UnknownTarget):
        apply(plant, AttackSpec("memory_tamper", "x", 0, {"address": 0x10, "value": 1}), 0)
    with pytest.raises(UnknownTarget):
        apply(plant, AttackSpec("firmware_corrupt", "x", 0, {"address": 0x20000000, "value": 1}), 0)


def test_injection_log_once():
    log = InjectionLog()
    spec = AttackSpec("uart_lockup", "gps", 0)
    log.add(spec, 0)
    with pytest.raises(ValueError):
        log.add(spec, 0)


def test_ground_truth_examples():
    sc = make_scenario(horizon=200000, attacks=[
        {"kind": "baud_change", "target": "gps", "at_tick": 5000, "params": {"new_baud": 115200}},
        {"kind": "stuck_value", "target": "baro", "at_tick": 20000},
        {"kind": "firmware_corrupt", "target": "flash", "at_tick": 0, "params": {"address": 0x08000021, "value": 4}},
    ])
    baud, stuck, fw = ground_truth(sc)
    assert baud.streams == {"bus.gps"} and baud.observable_at == 21000 + 10 * 9
    # six identical frames: starts 20500 .. 70500, last one ends 1530 ticks later, parsed 2 ticks after
    assert stuck.streams == {"frame.baro"} and stuck.observable_at == 70500 + 1530 + 2
    assert fw.streams == {"firmware"} and fw.observable_at == 0


def test_ground_truth_unreachable_tamper():
    # tampering a word the program never executes and no re-check: never observable
    sc = make_scenario(attacks=[{"kind": "firmware_corrupt", "target": "flash", "at_tick": 500,
                                 "params": {"address": 0x08000100, "value": 1}}])
    (gt,) = ground_truth(sc)
    assert not gt.reaches_stream


def test_no_attack_plant_trace_matches_golden(shipped):
    _, _, records = shipped("nominal")
    golden = make_plant(seed=scenario.load("nominal").seed)
    golden.command("permit", granted=True)
    outs = run_plant(golden, 30000)
    frames = [(f.start, f.data.hex()) for o in outs for f in o.emitted]
    logged = [(r.tick, r.payload["data"]) for r in records if r.kind == "frame" and r.label == "emitted" and r.tick <= 30000]
    assert frames == logged
