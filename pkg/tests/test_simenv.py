import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dvts.autoscaler import Policy
from dvts.capacity import TABLE1_CATALOG, catalog_by_name
from dvts.metrics import GB, MB, FleetConstants, normalize
from dvts.simenv import (
    AppModel,
    CostLedger,
    ScenarioError,
    SimVm,
    StealProcess,
    VmPerformance,
    WorkloadChange,
    WorkloadProfile,
    assign_users,
    emit_sample,
    generate_workload,
    load_scenario,
    run_experiment,
    scenario_from_dict,
)

from conftest import short_scenario_dict

CAT = catalog_by_name(TABLE1_CATALOG)
C = FleetConstants()


def sim_vm(type_name="m1.medium", freq=2.7, steal=(10.0, 10.0), jitter=0.0, seed=0):
    perf = VmPerformance(freq, steal[0], steal[1], jitter)
    rng = np.random.default_rng(seed)
    return SimVm("vm-00", CAT[type_name], perf, StealProcess(perf, rng), rng)


QUIET = AppModel(0.002, change=WorkloadChange(at=100.0), cpu_noise=0.0)


# workload

def test_workload_staircase():
    p = WorkloadProfile()
    assert generate_workload(p, 0) == 30
    assert generate_workload(p, 359.9) == 30
    assert generate_workload(p, 360) == 40
    assert generate_workload(p, 222 * 60) == 400
    assert generate_workload(p, 10 * 3600) == 400
    # wall-clock seconds are scaled up to simulated ones
    assert generate_workload(p, 6, time_compression=60, wall_clock=True) == 40
    with pytest.raises(ValueError):
        generate_workload(p, -1)


@given(st.floats(0, 1e5), st.floats(0, 1e5))
def test_workload_monotone(a, b):
    lo, hi = sorted([a, b])
    assert generate_workload(WorkloadProfile(), lo) <= generate_workload(WorkloadProfile(), hi)


def test_assign_users_examples():
    assert assign_users(10, [1.0]) == [10]
    assert assign_users(10, [0.25, 0.75]) == [3, 7]
    assert assign_users(7, [1 / 6, 2 / 6, 3 / 6]) == [1, 2, 4]
    assert assign_users(1, [0.5, 0.5]) == [1, 0]
    with pytest.raises(ValueError):
        assign_users(10, [])
    with pytest.raises(ValueError):
        assign_users(10, [0.5, 0.6])


@given(st.integers(0, 5000), st.lists(st.integers(1, 3), min_size=1, max_size=15))
def test_assign_users_conserves_and_stays_near_quota(total, specs):
    w = np.array(specs, dtype=float) / sum(specs)
    split = assign_users(total, w)
    assert sum(split) == total
    assert all(abs(n - total * wi) < 1 + 1e-9 for n, wi in zip(split, w))


# monitoring samples

def test_zero_users_idles_except_steal():
    s = emit_sample(sim_vm(), QUIET, 0, 0.0, C)
    assert (s.users, s.pct_steal, s.pct_idle) == (0, 10.0, 90.0)
    assert s.active_memory == pytest.approx(300 * MB)


def test_cpu_follows_demand():
    s = emit_sample(sim_vm(), QUIET, 100, 0.0, C)
    assert normalize(s, C).cpu_load == pytest.approx(0.2)


def test_post_change_memory_and_cpu():
    vm = sim_vm()
    s = emit_sample(vm, QUIET, 10, 200.0, C)
    assert s.active_memory == pytest.approx(300 * MB + 1 * GB + 4 * MB * 10)
    n = normalize(s, C)
    # ten percent of the VM's capacity on top of the per-user demand
    assert n.cpu_load == pytest.approx(0.02 + 0.1 * n.cpu_capacity)


def test_memory_capped_at_vm_ram():
    s = emit_sample(sim_vm("m1.small", 2.0), QUIET, 400, 200.0, C)
    assert s.active_memory == CAT["m1.small"].ram


def test_saturation_leaves_no_idle():
    s = emit_sample(sim_vm(), AppModel(1.0, cpu_noise=0.0, change=None), 50, 0.0, C)
    assert s.pct_idle == 0.0 and s.pct_steal == 10.0


def test_steal_process_bounds():
    perf = VmPerformance(2.0, 5.0, 25.0, 3.0)
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = StealProcess(perf, rng)
        assert 5.0 <= p.mean <= 25.0
        assert all(abs(p.draw() - p.mean) <= 3.0 for _ in range(20))
    with pytest.raises(ValueError):
        VmPerformance(2.0, 10.0, 5.0)


# billing

def test_ledger_rounds_up_to_started_hours():
    led = CostLedger()
    led.open("a", CAT["m1.small"], 0.0)
    led.open("b", CAT["m3.medium"], 3000.0)
    led.open("c", CAT["m1.medium"], 7100.0)
    led.close_all(7200.0)
    assert [it.billed_blocks for it in led.items] == [2, 2, 1]
    assert led.total == pytest.approx(2 * 0.058 + 2 * 0.098 + 0.117)


# scenario files

def test_bundled_scenario_by_name():
    s = load_scenario("default")
    assert s.duration == 5 * 3600 and s.provisioning_delay == 90
    assert s.app.change.at == 3.5 * 3600
    assert s.first_type(Policy.parse("dvts")) == "m1.small"
    assert s.first_type(Policy.parse("static:m3.medium")) == "m3.medium"


def test_scenario_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.json"):
        load_scenario(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(bad)
    d = short_scenario_dict()
    del d["performance"]["m3.medium"]
    with pytest.raises(ScenarioError, match="m3.medium"):
        scenario_from_dict(d)
    d = short_scenario_dict()
    d["performance"]["m1.small"]["core_freq_ghz"] = 9.0
    with pytest.raises(ScenarioError):
        scenario_from_dict(d)


# whole experiments

def _recount(ledger_json):
    total = 0.0
    for it in ledger_json["vms"]:
        blocks = max(1, math.ceil((it["end"] - it["start"]) / 3600 - 1e-9))
        assert blocks == it["billed_blocks"]
        total += blocks * it["cost_per_hour"]
    return total


@pytest.mark.parametrize("policy", ["static:m1.small", "dvts"])
def test_short_run_outputs(short_scenario, tmp_path, policy):
    res = run_experiment(short_scenario, policy, out_dir=tmp_path)
    assert res.status == "ok"
    ledger = json.loads((tmp_path / "ledger.json").read_text())
    assert ledger["total_cost"] == pytest.approx(_recount(ledger))
    events = [json.loads(line) for line in (tmp_path / "events.jsonl").read_text().splitlines()]
    ups = [e["time"] for e in events if e["event"] == "scale_up"]
    assert ups and all(b - a >= 600 for a, b in zip(ups, ups[1:]))
    assert len(ledger["vms"]) == len(ups) + 1
    assert sum(1 for _ in open(tmp_path / "samples.jsonl")) == res.samples
    if policy == "dvts":
        assert (tmp_path / "ann_snapshot.json").exists() and (tmp_path / "htm_snapshot.npz").exists()
        assert res.engine.trainer.k > 0
    else:
        assert {e["chosen_type"] for e in events if e["event"] == "scale_up"} == {"m1.small"}
        assert not (tmp_path / "ann_snapshot.json").exists()


def test_ready_events_follow_provisioning_delay(short_scenario):
    res = run_experiment(short_scenario, "static:m1.small")
    ups = {e["vm_id"]: e["time"] for e in res.events if e["event"] == "scale_up"}
    ready = {e["vm_id"]: e["time"] for e in res.events if e["event"] == "vm_ready"}
    for vm_id, t in ups.items():
        if vm_id in ready:
            assert ready[vm_id] == t + 90.0
    assert [e["time"] for e in res.events if e["event"] == "change_injected"] == [1200.0]


def test_rerun_is_byte_identical(short_scenario, tmp_path):
    run_experiment(short_scenario, "static:m3.medium", seed=4, out_dir=tmp_path / "a")
    run_experiment(short_scenario, "static:m3.medium", seed=4, out_dir=tmp_path / "b")
    for name in ("samples.jsonl", "events.jsonl", "ledger.json", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_samples(short_scenario, tmp_path):
    run_experiment(short_scenario, "static:m1.small", seed=1, out_dir=tmp_path / "a")
    run_experiment(short_scenario, "static:m1.small", seed=2, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "samples.jsonl").read_bytes() != (tmp_path / "b" / "samples.jsonl").read_bytes()


def test_unknown_static_type(short_scenario):
    with pytest.raises(ScenarioError):
        run_experiment(short_scenario, "static:t2.nano")
