import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cpsmon import scenario  # noqa: E402
from cpsmon.logfmt import read_log  # noqa: E402
from cpsmon.sim import run_scenario  # noqa: E402


class ShippedRuns:
    """Runs each shipped scenario once per session, on demand."""

    def __init__(self, root: Path):
        self.root = root
        self._cache = {}

    def __call__(self, name: str):
        if name not in self._cache:
            path = self.root / f"{name}.jsonl"
            result = run_scenario(scenario.load(name), path)
            header, records = read_log(path)
            self._cache[name] = (result, path, records)
        return self._cache[name]


@pytest.fixture(scope="session")
def shipped(tmp_path_factory):
    return ShippedRuns(tmp_path_factory.mktemp("shipped"))


def select(records, source=None, kind=None, label=None, **payload):
    return [
        r for r in records
        if (source is None or r.source == source)
        and (kind is None or r.kind == kind)
        and (label is None or r.label == label)
        and all(r.payload.get(k) == v for k, v in payload.items())
    ]
