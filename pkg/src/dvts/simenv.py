"""Deterministic simulated cloud: VM performance, application demand, workload and billing.

Time is simulated seconds from the experiment start. ``time_compression``
only relabels durations for wall-clock reporting (``wall_time = t /
time_compression``); every rate, interval and billing block scales with it,
so the dynamics and costs do not depend on the compression factor.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .ann import AnnModel, TrainerState, snapshot
from .autoscaler import FleetState, Policy, PolicyConfig, TriggerMetric, VmRecord, evaluate_trigger, recompute_weights, scale_up
from .capacity import TABLE1_CATALOG, VmTypeSpec, catalog_by_name
from .engine import LearningEngine
from .htm import DateEncoderConfig, HtmConfig, HtmRegion, SampleEncoder, ScalarEncoderConfig
from .metrics import GB, MB, FleetConstants, MonitoringSample
from .selector import SelectionInfeasible

log = logging.getLogger(__name__)

HOUR = 3600.0


@dataclass(frozen=True)
class WorkloadChange:
    at: float = 3.5 * HOUR
    cpu_util_delta: float = 10.0  # percentage points of the VM's capacity
    ram_fixed_delta: float = 1.0 * GB
    ram_per_user_delta: float = 2.0 * MB


@dataclass(frozen=True)
class AppModel:
    base_cpu_per_user: float
    base_ram_fixed: float = 300 * MB
    base_ram_per_user: float = 2 * MB
    change: WorkloadChange | None = field(default_factory=WorkloadChange)
    cpu_noise: float = 0.02  # relative sd of per-tick CPU demand
    ram_noise: float = 0.0
    disk_util: float = 5.0
    net_util: float = 5.0

    def __post_init__(self):
        if min(self.base_cpu_per_user, self.base_ram_fixed, self.base_ram_per_user) < 0:
            raise ValueError("application rates must be non-negative")

    def changed(self, t: float) -> bool:
        return self.change is not None and t >= self.change.at

    def cpu_demand(self, users: int, t: float, cpu_capacity: float) -> float:
        d = users * self.base_cpu_per_user
        if self.changed(t):
            d += self.change.cpu_util_delta / 100.0 * cpu_capacity
        return d

    def ram_demand(self, users: int, t: float) -> float:
        fixed, per_user = self.base_ram_fixed, self.base_ram_per_user
        if self.changed(t):
            fixed += self.change.ram_fixed_delta
            per_user += self.change.ram_per_user_delta
        return fixed + per_user * users


@dataclass(frozen=True)
class VmPerformance:
    """Simulated hardware behind one VM type."""

    core_freq_ghz: float
    steal_mean_low: float = 5.0
    steal_mean_high: float = 25.0
    steal_jitter: float = 3.0

    def __post_init__(self):
        if not 0 <= self.steal_mean_low <= self.steal_mean_high:
            raise ValueError("need 0 <= steal_mean_low <= steal_mean_high")
        if self.steal_mean_high + self.steal_jitter >= 100:
            raise ValueError("steal mean plus jitter must stay below 100")

    def mean_capacity(self, c: FleetConstants) -> float:
        steal = 0.5 * (self.steal_mean_low + self.steal_mean_high)
        return (100.0 - steal) * self.core_freq_ghz / (100.0 * c.max_cpu)


class StealProcess:
    """Per-instance mean steal drawn once, plus bounded uniform jitter per tick."""

    def __init__(self, perf: VmPerformance, rng: np.random.Generator):
        self.rng = rng
        self.mean = float(rng.uniform(perf.steal_mean_low, perf.steal_mean_high))
        self.jitter = perf.steal_jitter

    def draw(self) -> float:
        j = self.rng.uniform(-self.jitter, self.jitter) if self.jitter else 0.0
        return float(min(max(self.mean + j, 0.0), 99.0))


@dataclass(frozen=True)
class WorkloadProfile:
    initial_users: int = 30
    step_users: int = 10
    step_interval: float = 360.0
    max_users: int = 400

    def __post_init__(self):
        if min(self.initial_users, self.step_users, self.step_interval, self.max_users) <= 0:
            raise ValueError("workload parameters must be positive")


def generate_workload(profile: WorkloadProfile, t: float, time_compression: float = 1.0, wall_clock: bool = False) -> int:
    """Total users at simulated time ``t`` (or wall-clock time under compression)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    sim_t = t * time_compression if wall_clock else t
    steps = math.floor(sim_t / profile.step_interval + 1e-9)
    return int(min(profile.max_users, profile.initial_users + profile.step_users * steps))


def assign_users(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; ties go to the earlier VM."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise ValueError("no VMs to assign users to")
    if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
        raise ValueError("weights must be non-negative and sum to 1")
    quotas = total * w
    base = np.floor(quotas + 1e-9).astype(int)
    rest = total - int(base.sum())
    if rest > 0:
        order = sorted(range(w.size), key=lambda i: (-(quotas[i] - base[i]), i))
        for i in order[:rest]:
            base[i] += 1
    return base.tolist()


@dataclass
class SimVm:
    vm_id: str
    vm_type: VmTypeSpec
    perf: VmPerformance
    steal: StealProcess
    rng: np.random.Generator


def emit_sample(vm: SimVm, app: AppModel, users: int, t: float, c: FleetConstants) -> MonitoringSample:
    steal = vm.steal.draw()
    share = vm.perf.core_freq_ghz / c.max_cpu  # fleet scale of 100% busy on this VM
    capacity = (100.0 - steal) / 100.0 * share
    demand = app.cpu_demand(users, t, capacity)
    if app.cpu_noise and users:
        demand *= max(0.0, 1.0 + vm.rng.normal(0.0, app.cpu_noise))
    if demand >= capacity:
        idle = 0.0
    else:
        idle = max(0.0, 100.0 - steal - demand / share * 100.0)
    ram = app.ram_demand(users, t)
    if app.ram_noise:
        ram *= max(0.0, 1.0 + vm.rng.normal(0.0, app.ram_noise))
    # a VM cannot report more active memory than it has
    ram = min(ram, vm.vm_type.ram)
    return MonitoringSample(
        timestamp=t,
        vm_id=vm.vm_id,
        vm_type=vm.vm_type.name,
        users=int(users),
        pct_idle=idle,
        pct_steal=steal,
        core_freqs=(vm.perf.core_freq_ghz,),
        active_memory=ram,
        disk_util=app.disk_util,
        net_util=app.net_util,
    )


@dataclass
class BillItem:
    vm_id: str
    vm_type: str
    start: float
    end: float
    cost_per_hour: float
    billed_blocks: int = 0
    cost: float = 0.0


@dataclass
class CostLedger:
    block_seconds: float = HOUR
    items: list[BillItem] = field(default_factory=list)

    def open(self, vm_id: str, vm_type: VmTypeSpec, start: float) -> None:
        self.items.append(BillItem(vm_id, vm_type.name, start, start, vm_type.cost_per_hour))

    def close_all(self, end: float) -> None:
        for it in self.items:
            it.end = end
            it.billed_blocks = max(1, math.ceil((it.end - it.start) / self.block_seconds - 1e-9))
            it.cost = it.cost_per_hour * it.billed_blocks

    @property
    def total(self) -> float:
        return math.fsum(it.cost for it in self.items)

    def to_dict(self) -> dict:
        return {
            "block_seconds": self.block_seconds,
            "vms": [asdict(it) for it in self.items],
            "total_cost": round(self.total, 10),
        }


@dataclass(frozen=True)
class LearningSettings:
    user_scale: float = 1000.0
    init: str = "uniform"
    ann_seed: int = 0
    eq4_literal: bool = False
    htm: HtmConfig = field(default_factory=HtmConfig)
    encoder: SampleEncoder = field(default_factory=SampleEncoder)


@dataclass(frozen=True)
class Scenario:
    name: str
    app: AppModel
    performance: Mapping[str, VmPerformance]
    catalog: tuple[VmTypeSpec, ...] = TABLE1_CATALOG
    constants: FleetConstants = FleetConstants()
    workload: WorkloadProfile = WorkloadProfile()
    autoscaler: PolicyConfig = PolicyConfig()
    learning: LearningSettings = LearningSettings()
    duration: float = 5 * HOUR
    tick: float = 5.0
    provisioning_delay: float = 90.0
    time_compression: float = 60.0
    initial_vm_type: str | None = None
    seed: int = 0

    def __post_init__(self):
        names = {t.name for t in self.catalog}
        missing = names - set(self.performance)
        if missing:
            raise ValueError(f"no performance model for {sorted(missing)}")
        for name, perf in self.performance.items():
            if perf.core_freq_ghz > self.constants.fr_max:
                raise ValueError(f"{name}: core frequency above fr_max")
        if self.initial_vm_type is not None and self.initial_vm_type not in names:
            raise ValueError(f"unknown initial_vm_type {self.initial_vm_type!r}")
        if self.duration <= 0 or self.tick <= 0 or self.time_compression <= 0 or self.provisioning_delay < 0:
            raise ValueError("durations must be positive")

    def first_type(self, policy: Policy) -> str:
        if self.initial_vm_type is not None:
            return self.initial_vm_type
        return policy.vm_type if policy.is_static else "m1.small"


# scenario files


class ScenarioError(ValueError):
    pass


def _mb(d: Mapping, key: str, default: float) -> float:
    return float(d.get(key, default / MB)) * MB


def scenario_from_dict(d: Mapping) -> Scenario:
    try:
        consts = d.get("constants", {})
        constants = FleetConstants(
            fr_max=float(consts.get("fr_max", 3.5)),
            n_max_cores=int(consts.get("n_max_cores", 1)),
            ram_max=float(consts.get("ram_max_gb", 3.75)) * GB,
        )
        catalog = tuple(
            VmTypeSpec(t["name"], float(t["cpu_spec"]), float(t["ram_gb"]) * GB, float(t["cost_per_hour"]))
            for t in d.get("catalog", [])
        ) or TABLE1_CATALOG
        perf = {name: VmPerformance(**p) for name, p in d["performance"].items()}
        a = d["app"]
        ch = a.get("change", {})
        change = None
        if ch is not None:
            change = WorkloadChange(
                at=float(ch.get("at_s", 3.5 * HOUR)),
                cpu_util_delta=float(ch.get("cpu_util_delta", 10.0)),
                ram_fixed_delta=_mb(ch, "ram_fixed_delta_mb", 1 * GB),
                ram_per_user_delta=_mb(ch, "ram_per_user_delta_mb", 2 * MB),
            )
        app = AppModel(
            base_cpu_per_user=float(a["base_cpu_per_user"]),
            base_ram_fixed=_mb(a, "base_ram_fixed_mb", 300 * MB),
            base_ram_per_user=_mb(a, "base_ram_per_user_mb", 2 * MB),
            change=change,
            cpu_noise=float(a.get("cpu_noise", 0.02)),
            ram_noise=float(a.get("ram_noise", 0.0)),
            disk_util=float(a.get("disk_util", 5.0)),
            net_util=float(a.get("net_util", 5.0)),
        )
        w = d.get("workload", {})
        workload = WorkloadProfile(
            initial_users=int(w.get("initial_users", 30)),
            step_users=int(w.get("step_users", 10)),
            step_interval=float(w.get("step_interval_s", 360.0)),
            max_users=int(w.get("max_users", 400)),
        )
        s = d.get("autoscaler", {})
        autoscaler = PolicyConfig(
            trigger_threshold=float(s.get("trigger_threshold", 0.7)),
            sustain_seconds=float(s.get("sustain_s", 10.0)),
            cooldown=float(s.get("cooldown_s", 600.0)),
            sample_interval=float(d.get("tick_s", 5.0)),
            trigger_metric=TriggerMetric(s.get("trigger_metric", "mean_of_max")),
            delta=int(s.get("delta", 5)),
        )
        ln = d.get("learning", {})
        enc = ln.get("encoder", {})
        encoder = SampleEncoder(
            date=DateEncoderConfig(**enc.get("date", {})),
            users=ScalarEncoderConfig(**{"min_value": 0.0, "max_value": 1000.0, **enc.get("users", {})}),
            cpu=ScalarEncoderConfig(**{"min_value": 0.0, "max_value": 1.0, **enc.get("cpu", {})}),
            ram=ScalarEncoderConfig(**{"min_value": 0.0, "max_value": 1.0, **enc.get("ram", {})}),
        )
        learning = LearningSettings(
            user_scale=float(ln.get("user_scale", 1000.0)),
            init=str(ln.get("init", "uniform")),
            ann_seed=int(ln.get("ann_seed", 0)),
            eq4_literal=bool(ln.get("eq4_literal", False)),
            htm=HtmConfig(**ln.get("htm", {})),
            encoder=encoder,
        )
        return Scenario(
            name=str(d.get("name", "scenario")),
            app=app,
            performance=perf,
            catalog=catalog,
            constants=constants,
            workload=workload,
            autoscaler=autoscaler,
            learning=learning,
            duration=float(d.get("duration_s", 5 * HOUR)),
            tick=float(d.get("tick_s", 5.0)),
            provisioning_delay=float(d.get("provisioning_delay_s", 90.0)),
            time_compression=float(d.get("time_compression", 60.0)),
            initial_vm_type=d.get("initial_vm_type"),
            seed=int(d.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid scenario: {exc}") from exc


def read_scenario_dict(source: str | Path) -> dict:
    """Raw JSON of a scenario file, or of a bundled scenario given by bare name (e.g. ``default``)."""
    p = Path(source)
    if not p.exists() and p.suffix == "" and p.parent == Path("."):
        bundled = resources.files("dvts.scenarios") / f"{source}.json"
        if bundled.is_file():
            return json.loads(bundled.read_text())
    if not p.is_file():
        raise FileNotFoundError(f"scenario file not found: {source}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{source}: {exc}") from exc


def load_scenario(source: str | Path) -> Scenario:
    return scenario_from_dict(read_scenario_dict(source))


# experiment driver


@dataclass
class ExperimentResult:
    policy: str
    seed: int
    ledger: CostLedger
    events: list[dict]
    samples: int
    status: str = "ok"
    engine: LearningEngine | None = None
    first_detector: HtmRegion | None = None

    @property
    def scale_events(self) -> list[dict]:
        return [e for e in self.events if e["event"] == "scale_up"]

    def events_around(self, t: float) -> tuple[int, int]:
        ev = self.scale_events
        return sum(e["time"] < t for e in ev), sum(e["time"] >= t for e in ev)

    def summary_row(self, scenario: Scenario) -> dict:
        change_at = scenario.app.change.at if scenario.app.change else math.inf
        before, after = self.events_around(change_at)
        types = {}
        for it in self.ledger.items:
            types[it.vm_type] = types.get(it.vm_type, 0) + 1
        return {
            "scenario": scenario.name,
            "policy": self.policy,
            "seed": self.seed,
            "status": self.status,
            "total_cost": f"{self.ledger.total:.4f}",
            "vm_count": len(self.ledger.items),
            "scale_ups_before_change": before,
            "scale_ups_after_change": after,
            "vm_types": ";".join(f"{k}={v}" for k, v in sorted(types.items())),
        }


SUMMARY_FIELDS = [
    "scenario",
    "policy",
    "seed",
    "status",
    "total_cost",
    "vm_count",
    "scale_ups_before_change",
    "scale_ups_after_change",
    "vm_types",
]


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def run_experiment(
    scenario: Scenario,
    policy: Policy | str,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    learn_static: bool = False,
    progress: Callable[[float], None] | None = None,
) -> ExperimentResult:
    """Drive one experiment and optionally write its output files.

    Static baselines do not consult the learning pipeline, so by default it
    is switched off for them (``learn_static`` turns it back on).
    """
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    seed = scenario.seed if seed is None else seed
    config = replace(scenario.autoscaler, policy=policy)
    cat = catalog_by_name(scenario.catalog)
    if policy.is_static and policy.vm_type not in cat:
        raise ScenarioError(f"unknown VM type {policy.vm_type!r}")
    c = scenario.constants
    app = scenario.app
    change_at = app.change.at if app.change else None

    learn = not policy.is_static or learn_static
    ls = scenario.learning
    engine = LearningEngine(
        scenario.catalog,
        c,
        ann=AnnModel(user_scale=ls.user_scale, seed=ls.ann_seed, init=ls.init),
        trainer=TrainerState(),
        eq4_literal=ls.eq4_literal,
        learn=learn,
    )

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        samples_fh = open(out / "samples.jsonl", "w")
    else:
        samples_fh = io.StringIO()

    fleet = FleetState()
    sims: dict[str, SimVm] = {}
    ledger = CostLedger(block_seconds=HOUR)
    events: list[dict] = []
    n_vms = 0

    def provision(vm_type: VmTypeSpec, now: float) -> str:
        nonlocal n_vms
        vm_id = f"vm-{n_vms:02d}"
        rng = np.random.default_rng([seed, n_vms])
        perf = scenario.performance[vm_type.name]
        sims[vm_id] = SimVm(vm_id, vm_type, perf, StealProcess(perf, rng), rng)
        ledger.open(vm_id, vm_type, now)
        n_vms += 1
        return vm_id

    first_type = cat[scenario.first_type(policy)]
    first_id = provision(first_type, 0.0)
    detector = HtmRegion(ls.htm, ls.encoder) if learn else None
    fleet.vms.append(VmRecord(first_id, first_type, None, detector, 0.0, 0.0))
    fleet.weights = recompute_weights(fleet.active(0.0))

    window: deque = deque(maxlen=config.window_samples)
    ram_cap = {}
    status = "ok"
    n_samples = 0
    ready_logged = {first_id}
    changed_logged = False
    n_ticks = int(math.floor(scenario.duration / scenario.tick + 1e-9))
    end_time = scenario.duration

    try:
        for i in range(n_ticks):
            t = i * scenario.tick
            if change_at is not None and not changed_logged and t >= change_at:
                events.append({"event": "change_injected", "time": t, "wall_time": t / scenario.time_compression})
                changed_logged = True
            active = fleet.active(t)
            for v in active:
                if v.vm_id not in ready_logged:
                    ready_logged.add(v.vm_id)
                    events.append({"event": "vm_ready", "time": t, "vm_id": v.vm_id, "vm_type": v.vm_type.name})
            if set(fleet.weights) != {v.vm_id for v in active}:
                fleet.weights = recompute_weights(active)
            total = generate_workload(scenario.workload, t)
            split = assign_users(total, [fleet.weights[v.vm_id] for v in active])

            tick_samples = []
            for v, users in zip(active, split):
                raw = emit_sample(sims[v.vm_id], app, users, t, c)
                samples_fh.write(_dumps(raw.to_dict()) + "\n")
                n_samples += 1
                obs = engine.observe(raw, v.detector)
                tick_samples.append(obs.sample)
                ram_cap[v.vm_id] = engine.ram_capacity(v.vm_type.name)
            window.append(tick_samples)

            if evaluate_trigger(fleet, window, ram_cap, t, config):
                select = (lambda: engine.select(config.delta, fallback=first_type.name)) if not policy.is_static else None
                try:
                    pending_id = f"vm-{n_vms:02d}"
                    ev = scale_up(fleet, config, t, pending_id, cat, select, scenario.provisioning_delay)
                except SelectionInfeasible as exc:
                    events.append({"event": "error", "time": t, "message": str(exc)})
                    status = "aborted"
                    end_time = t
                    break
                vm_type_name = ev.chosen_type
                provision(cat[vm_type_name], t)
                row = ev.to_dict()
                row["wall_time"] = t / scenario.time_compression
                events.append(row)
                log.info("t=%.0fs scale up -> %s", t, vm_type_name)
            if progress is not None and i % 720 == 0:
                progress(t / scenario.duration)
    except Exception as exc:  # engine failure: record it and stop cleanly
        log.exception("experiment aborted")
        events.append({"event": "error", "time": t, "message": f"{type(exc).__name__}: {exc}"})
        status = "aborted"
        end_time = t
    finally:
        ledger.close_all(end_time)
        if out is not None:
            samples_fh.close()

    result = ExperimentResult(
        policy=str(policy),
        seed=seed,
        ledger=ledger,
        events=events,
        samples=n_samples,
        status=status,
        engine=engine if learn else None,
        first_detector=detector,
    )
    if out is not None:
        write_outputs(result, scenario, out)
    return result


def write_outputs(result: ExperimentResult, scenario: Scenario, out: Path) -> None:
    with open(out / "events.jsonl", "w") as fh:
        for e in result.events:
            fh.write(_dumps(e) + "\n")
    ledger = result.ledger.to_dict()
    ledger.update({"policy": result.policy, "seed": result.seed, "scenario": scenario.name, "status": result.status})
    with open(out / "ledger.json", "w") as fh:
        fh.write(json.dumps(ledger, sort_keys=True, indent=2) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerow(result.summary_row(scenario))
    if result.engine is not None:
        with open(out / "ann_snapshot.json", "w") as fh:
            json.dump(snapshot(result.engine.ann, result.engine.trainer), fh)
        with open(out / "capacity.jsonl", "w") as fh:
            for t in result.engine.repository.types():
                for r in result.engine.repository.records(t):
                    fh.write(_dumps(asdict(r)) + "\n")
    if result.first_detector is not None:
        result.first_detector.save(out / "htm_snapshot.npz")
