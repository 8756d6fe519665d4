"""Reactive scale-up policy: trigger, cooldown, type choice and load-balancer weights."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .capacity import CapacityEstimate, VmTypeSpec
from .htm import AnomalySource
from .metrics import NormalizedSample
from .selector import SelectionResult


class TriggerMetric(str, enum.Enum):
    MEAN_OF_MAX = "mean_of_max"  # mean over VMs of max(cpu_rel, ram_rel)
    CPU = "cpu"  # mean over VMs of cpu_rel


@dataclass(frozen=True)
class Policy:
    """``dvts`` or ``static:<type>``."""

    kind: str
    vm_type: str | None = None

    @classmethod
    def parse(cls, text: str) -> "Policy":
        if text == "dvts":
            return cls("dvts")
        if text.startswith("static:") and len(text) > len("static:"):
            return cls("static", text.split(":", 1)[1])
        raise ValueError(f"policy must be 'dvts' or 'static:<type>', got {text!r}")

    @property
    def is_static(self) -> bool:
        return self.kind == "static"

    def __str__(self) -> str:
        return "dvts" if self.kind == "dvts" else f"static:{self.vm_type}"


@dataclass(frozen=True)
class PolicyConfig:
    policy: Policy = Policy("dvts")
    trigger_threshold: float = 0.70
    sustain_seconds: float = 10.0
    cooldown: float = 600.0
    sample_interval: float = 5.0
    trigger_metric: TriggerMetric = TriggerMetric.MEAN_OF_MAX
    delta: int = 5

    def __post_init__(self):
        if not 0.0 < self.trigger_threshold < 1.0:
            raise ValueError("trigger_threshold must lie in (0, 1)")
        if self.sustain_seconds <= 0 or self.cooldown <= 0 or self.sample_interval <= 0:
            raise ValueError("durations must be positive")
        object.__setattr__(self, "trigger_metric", TriggerMetric(self.trigger_metric))

    @property
    def window_samples(self) -> int:
        return max(1, math.ceil(self.sustain_seconds / self.sample_interval - 1e-9))


@dataclass
class VmRecord:
    vm_id: str
    vm_type: VmTypeSpec
    capacity: CapacityEstimate | None
    detector: AnomalySource | None
    requested_at: float
    ready_at: float


@dataclass
class FleetState:
    vms: list[VmRecord] = field(default_factory=list)
    weights: dict[str, float] = field(default_factory=dict)
    last_scale_time: float | None = None

    def active(self, now: float) -> list[VmRecord]:
        return [v for v in self.vms if v.ready_at <= now]

    def by_id(self, vm_id: str) -> VmRecord:
        for v in self.vms:
            if v.vm_id == vm_id:
                return v
        raise KeyError(vm_id)


@dataclass(frozen=True)
class ScalingEvent:
    time: float
    vm_id: str
    chosen_type: str
    reason: str = "ThresholdBreach"
    selection: dict | None = None

    def to_dict(self) -> dict:
        return {
            "event": "scale_up",
            "time": self.time,
            "vm_id": self.vm_id,
            "chosen_type": self.chosen_type,
            "reason": self.reason,
            "selection": self.selection,
        }


def recompute_weights(vms: Sequence[VmRecord]) -> dict[str, float]:
    """Shares proportional to each VM's declared compute units."""
    if not vms:
        raise ValueError("need at least one active VM")
    total = math.fsum(v.vm_type.cpu_spec for v in vms)
    return {v.vm_id: v.vm_type.cpu_spec / total for v in vms}


def relative_utilisation(s: NormalizedSample, ram_capacity: float, metric: TriggerMetric) -> float:
    cpu_rel = s.cpu_load / s.cpu_capacity if s.cpu_capacity > 0 else 1.0
    if metric is TriggerMetric.CPU:
        return cpu_rel
    return max(cpu_rel, s.ram_load / ram_capacity)


def fleet_utilisation(tick: Sequence[NormalizedSample], ram_capacity: Mapping[str, float], metric: TriggerMetric) -> float:
    if not tick:
        return 0.0
    return math.fsum(relative_utilisation(s, ram_capacity[s.vm_id], metric) for s in tick) / len(tick)


def evaluate_trigger(
    fleet: FleetState,
    window: Sequence[Sequence[NormalizedSample]],
    ram_capacity: Mapping[str, float],
    now: float,
    config: PolicyConfig,
) -> bool:
    """True when every tick in the trailing window breached and cooldown is over.

    ``window`` holds one list of per-VM samples per tick, oldest first.
    ``ram_capacity`` maps VM id to its RAM on the fleet-normalised scale.
    """
    if fleet.last_scale_time is not None and now - fleet.last_scale_time < config.cooldown:
        return False
    need = config.window_samples
    if len(window) < need:
        return False
    return all(
        fleet_utilisation(tick, ram_capacity, config.trigger_metric) > config.trigger_threshold
        for tick in list(window)[-need:]
    )


def scale_up(
    fleet: FleetState,
    config: PolicyConfig,
    now: float,
    vm_id: str,
    catalog: Mapping[str, VmTypeSpec],
    select: Callable[[], SelectionResult] | None = None,
    provisioning_delay: float = 0.0,
) -> ScalingEvent:
    """Pick a type, register the new VM and return the event.

    Static policies use their fixed type; DVTS calls ``select``. The new VM's
    anomaly detector starts as a copy of the first VM's. Weights are
    recomputed over the VMs that are ready at ``now``.
    """
    detail = None
    if config.policy.is_static:
        chosen = config.policy.vm_type
    else:
        if select is None:
            raise ValueError("DVTS policy needs a selection callback")
        result = select()
        chosen = result.chosen_type
        detail = result.to_record(now)
    if chosen not in catalog:
        raise KeyError(f"unknown VM type {chosen!r}")
    first = fleet.vms[0].detector if fleet.vms else None
    fleet.vms.append(
        VmRecord(
            vm_id=vm_id,
            vm_type=catalog[chosen],
            capacity=None,
            detector=first.clone() if first is not None else None,
            requested_at=now,
            ready_at=now + provisioning_delay,
        )
    )
    fleet.last_scale_time = now
    fleet.weights = recompute_weights(fleet.active(now))
    return ScalingEvent(now, vm_id, chosen, selection=detail)
