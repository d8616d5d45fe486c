import pytest

from cpsmon.errors import AddressOutOfRange, InsufficientEdges, UnknownSensor
from cpsmon.plant.bus import BusConfig, edge_ticks, measure_bit_period
from cpsmon.plant.core import CONNECTED, IDLE, ISOLATED, Fault
from cpsmon.plant.firmware import FirmwareImage
from cpsmon.plant.isa import FAILSAFE_ADDRESS, FLASH_BASE, RAM_BASE, RAM_WORDS
from cpsmon.plant.sensors import FRAME_LEN, GENERATORS, decode

from helpers import make_plant, run_plant
from oracles import modal_gap, uart_transitions


@pytest.mark.parametrize("baud,period", [(57600, 17), (115200, 9), (9600, 104)])
def test_bit_period_matches_edge_count(baud, period):
    data = GENERATORS["gps"](0, 1, 0)
    edges = uart_transitions(data, 100, BusConfig("x", baud).bit_period_ticks)
    assert modal_gap(edges) == period == round(1e6 / baud)
    assert edge_ticks(data, 100, period) == edges
    assert measure_bit_period(edges) == period


def test_silent_bus_has_no_period():
    with pytest.raises(InsufficientEdges):
        measure_bit_period([])
    plant = make_plant()
    plant.step(0)
    with pytest.raises(InsufficientEdges):
        plant.measure_bit_period("gps")


def test_plant_measures_live_bus():
    plant = make_plant()
    run_plant(plant, 1000 + 10 * 17)
    assert plant.measure_bit_period("gps") == 17
    with pytest.raises(UnknownSensor):
        plant.measure_bit_period("lidar")


def test_periodic_emission():
    plant = make_plant(gps_period=100)
    outs = run_plant(plant, 1200)
    starts = [f.start for o in outs for f in o.emitted if f.sensor_id == "gps"]
    assert starts == [1000, 1100, 1200]
    assert len([f for f in outs[1200].emitted if f.sensor_id == "gps"]) == 1


def test_frames_are_wellformed():
    for kind in ("gps", "baro"):
        for t in range(0, 100000, 9973):
            f = GENERATORS[kind](t, 5, t // 100)
            assert len(f) == FRAME_LEN[kind]
            decode(kind, f)


def test_isolation_blocks_delivery_from_next_tick():
    plant = make_plant()
    run_plant(plant, 999)
    plant.set_crossbar("gps", ISOLATED)
    assert plant.crossbar.connection["gps"] == CONNECTED  # not before the boundary
    outs = run_plant(plant, 30000)
    assert plant.crossbar.connection["gps"] == ISOLATED
    assert plant.crossbar.rx_line["gps"] == IDLE
    gps_ends = [e for o in outs for e in o.ended if e.frame.sensor_id == "gps"]
    assert gps_ends and not any(e.delivered for e in gps_ends)
    assert any(f.sensor_id == "gps" for o in outs for f in o.emitted)


def test_frame_conservation():
    plant = make_plant()

    def flip(p, t):
        if t == 30000:
            p.set_crossbar("gps", ISOLATED)
        if t == 71000:
            p.set_crossbar("gps", CONNECTED)

    run_plant(plant, 150000, flip)
    for sid, st in plant.stats.items():
        in_flight = plant.in_flight[sid] is not None
        assert st["delivered"] + st["blocked"] + in_flight == st["emitted"], sid
    assert plant.stats["gps"]["blocked"] >= 2


def test_reconfigure_clears_recoverable_baud_fault():
    plant = make_plant()
    plant.step(0)
    plant.inject("gps", Fault("baud_change", True, {"new_baud": 115200}))
    run_plant(plant, 1000 + 90)
    assert plant.measure_bit_period("gps") == 9
    plant.reconfigure_sensor("gps")
    run_plant(plant, 21000 + 200)
    assert plant.measure_bit_period("gps") == 17
    with pytest.raises(UnknownSensor):
        plant.reconfigure_sensor("lidar")


def test_unrecoverable_lockup_survives_reconfigure():
    plant = make_plant()
    plant.step(0)
    plant.inject("gps", Fault("uart_lockup", False, {}))
    plant.reconfigure_sensor("gps")
    run_plant(plant, 30000)
    assert plant.hrim_locked["gps"]
    assert plant.stats["gps"]["delivered"] == 0


def test_nominal_branch_trace_starts_with_mcu_init_call_and_return():
    plant = make_plant()
    plant.command("permit", granted=True)
    outs = run_plant(plant, 12000)
    br = [b for o in outs for b in o.branches if b.kind != "jump"]
    mcu = plant.program.symbols["mcu_init"][0]
    assert br[0].kind == "call" and br[0].target_address == mcu
    assert plant.program.function_at(br[0].site_address) == "main"
    assert br[1].kind == "return" and br[1].target_address == br[0].return_address


def test_tamper_memory_leaves_reference_alone():
    plant = make_plant()
    ref = plant.reference_image
    digest = ref.digest
    plant.tamper_memory(FLASH_BASE + 5, 0xDEAD)
    assert plant.live_image().digest != digest
    assert plant.reference_image is ref and ref.digest == digest
    assert FirmwareImage(ref.base_address, ref.words).digest == digest


def test_identical_write_is_invisible():
    plant = make_plant()
    gen = plant.mem_generation
    plant.tamper_memory(FLASH_BASE, plant.read_memory(FLASH_BASE))
    assert plant.mem_generation == gen
    assert plant.live_image().digest == plant.reference_image.digest


def test_tampered_return_slot_changes_next_return():
    plant = make_plant()
    plant.command("permit", granted=True)
    slot = RAM_BASE + RAM_WORDS - 1

    def tamper(p, t):
        if t == 5000:
            p.tamper_memory(slot, FLASH_BASE + 0x30)

    outs = run_plant(plant, 11000, tamper)
    ret = next(b for o in outs for b in o.branches if b.kind == "return")
    assert ret.return_address == FLASH_BASE + 0x30


@pytest.mark.parametrize("addr", [FLASH_BASE - 1, RAM_BASE + RAM_WORDS, 0])
def test_address_out_of_range(addr):
    with pytest.raises(AddressOutOfRange):
        make_plant().tamper_memory(addr, 1)


def test_failsafe_in_image():
    plant = make_plant()
    assert plant.reference_image.contains(FAILSAFE_ADDRESS)


def test_nominal_trace_is_a_function_of_seed():
    def trace(seed):
        p = make_plant(seed)
        p.command("permit", granted=True)
        outs = run_plant(p, 40000)
        return [(f.start, f.data) for o in outs for f in o.emitted], [b for o in outs for b in o.branches]

    assert trace(4) == trace(4)
    assert trace(4)[0] != trace(5)[0]


def test_step_must_be_sequential():
    plant = make_plant()
    plant.step(0)
    with pytest.raises(ValueError):
        plant.step(2)
