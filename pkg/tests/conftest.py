import copy
import json
from importlib import resources

import pytest

from dvts.simenv import scenario_from_dict


def default_scenario_dict() -> dict:
    return json.loads((resources.files("dvts.scenarios") / "default.json").read_text())


def short_scenario_dict(duration=2400, change_at=1200, step=60) -> dict:
    """The default scenario squeezed into a few simulated minutes."""
    d = copy.deepcopy(default_scenario_dict())
    d["name"] = "short"
    d["duration_s"] = duration
    d["app"]["change"]["at_s"] = change_at
    d["workload"]["step_interval_s"] = step
    return d


@pytest.fixture
def short_scenario():
    return scenario_from_dict(short_scenario_dict())


@pytest.fixture
def short_scenario_file(tmp_path):
    p = tmp_path / "short.json"
    p.write_text(json.dumps(short_scenario_dict()))
    return p
