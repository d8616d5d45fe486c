from cpsmon import scenario
from cpsmon.plant.bus import BusConfig
from cpsmon.plant.core import Plant
from cpsmon.plant.isa import reference_program
from cpsmon.plant.sensors import SensorModel

TWO_SENSORS = [
    {"id": "gps", "kind": "gps", "emit_period": 20000, "offset": 1000},
    {"id": "baro", "kind": "baro", "emit_period": 10000, "offset": 500},
]


def make_scenario(horizon=60000, attacks=(), sensors=TWO_SENSORS, **monitors):
    return scenario.from_dict({
        "name": "t", "horizon_ticks": horizon, "seed": 3,
        "plant": {"sensors": list(sensors)},
        "monitors": monitors,
        "attacks": list(attacks),
    })


def make_plant(seed=0, gps_period=20000, baro_period=10000):
    sensors = [
        SensorModel("gps", "gps", gps_period, 1000, BusConfig("gps", 57600)),
        SensorModel("baro", "baro", baro_period, 500, BusConfig("baro", 57600)),
    ]
    return Plant(sensors, reference_program(), seed=seed)


def run_plant(plant, upto, on_tick=None):
    outs = []
    for t in range(plant.tick + 1, upto + 1):
        if on_tick:
            on_tick(plant, t)
        outs.append(plant.step(t))
    return outs
