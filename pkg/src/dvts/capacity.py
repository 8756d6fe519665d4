"""VM type catalog, capacity repository and capacity estimation."""

from __future__ import annotations

import enum
import json
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .metrics import GB, FleetConstants


class NoCapacityData(LookupError):
    pass


@dataclass(frozen=True)
class VmTypeSpec:
    name: str
    cpu_spec: float
    ram: float
    cost_per_hour: float

    def __post_init__(self):
        if self.cpu_spec <= 0 or self.ram <= 0 or self.cost_per_hour <= 0:
            raise ValueError(f"{self.name}: cpu_spec, ram and cost_per_hour must be positive")


# Sydney region prices used in the reference experiment.
TABLE1_CATALOG: tuple[VmTypeSpec, ...] = (
    VmTypeSpec("m1.small", 1, 1.7 * GB, 0.058),
    VmTypeSpec("m1.medium", 2, 3.75 * GB, 0.117),
    VmTypeSpec("m3.medium", 3, 3.75 * GB, 0.098),
)


def catalog_by_name(catalog: Iterable[VmTypeSpec]) -> dict[str, VmTypeSpec]:
    return {t.name: t for t in catalog}


def load_catalog(path: str | Path) -> list[VmTypeSpec]:
    """Read a JSON list of VM type objects (ram in bytes, or ``ram_gb``)."""
    with open(path) as fh:
        raw = json.load(fh)
    out = []
    for item in raw:
        item = dict(item)
        if "ram_gb" in item:
            item["ram"] = item.pop("ram_gb") * GB
        out.append(VmTypeSpec(**item))
    return out


def dump_catalog(catalog: Iterable[VmTypeSpec], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump([asdict(t) for t in catalog], fh, indent=2)


@dataclass(frozen=True)
class CapacityRecord:
    time: float
    vm_type: str
    vm_id: str
    cpu_capacity_norm: float

    def __post_init__(self):
        if not 0.0 < self.cpu_capacity_norm <= 1.0:
            raise ValueError(f"cpu_capacity_norm {self.cpu_capacity_norm} outside (0, 1]")


class Source(str, enum.Enum):
    MEASURED = "Measured"
    EXTRAPOLATED = "Extrapolated"


@dataclass(frozen=True)
class CapacityEstimate:
    cpu_capacity: float
    ram_capacity: float
    source: Source


class CapacityRepository:
    """Append-only store of measured CPU capacities keyed by VM type.

    Writes are serialised by a lock; readers get copies. When ``path`` is
    given every record is also appended to that JSON-lines file.
    """

    window = 10

    def __init__(self, path: str | Path | None = None):
        self._by_type: dict[str, list[CapacityRecord]] = defaultdict(list)
        self._lock = threading.Lock()
        self._fh = open(path, "a") if path is not None else None

    def record(self, r: CapacityRecord) -> None:
        with self._lock:
            self._by_type[r.vm_type].append(r)
            if self._fh is not None:
                self._fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    def extend(self, records: Iterable[CapacityRecord]) -> None:
        for r in records:
            self.record(r)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def records(self, vm_type: str) -> list[CapacityRecord]:
        with self._lock:
            return list(self._by_type.get(vm_type, ()))

    def types(self) -> list[str]:
        with self._lock:
            return sorted(t for t, recs in self._by_type.items() if recs)

    def __len__(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._by_type.values())

    def measured_mean(self, vm_type: str) -> float | None:
        with self._lock:
            recs = self._by_type.get(vm_type)
            if not recs:
                return None
            tail = recs[-self.window:]
            return sum(r.cpu_capacity_norm for r in tail) / len(tail)

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for t in self.types():
            out[t] = {"records": len(self.records(t)), "mean_last10": self.measured_mean(t)}
        return out

    @classmethod
    def load(cls, path: str | Path) -> "CapacityRepository":
        repo = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    repo.record(CapacityRecord(**json.loads(line)))
        return repo


def estimate_cpu_capacity(
    vm_type: str,
    catalog: Mapping[str, VmTypeSpec],
    repo: CapacityRepository,
    eq4_literal: bool = False,
) -> tuple[float, Source]:
    """Mean of the last 10 measurements, or extrapolation from measured types.

    Extrapolation scales each measured type's capacity per compute unit to the
    target's compute units and averages over types. ``eq4_literal`` switches
    to the inverse form (measured capacity times measured spec over target
    spec), kept for comparison runs. Extrapolated values are capped at 1,
    the largest capacity the fleet-normalised scale can express.
    """
    if vm_type not in catalog:
        raise KeyError(f"unknown VM type {vm_type!r}")
    mean = repo.measured_mean(vm_type)
    if mean is not None:
        return mean, Source.MEASURED

    measured = [(t, repo.measured_mean(t)) for t in repo.types() if t in catalog]
    if not measured:
        raise NoCapacityData("capacity repository holds no measurements")
    target = catalog[vm_type].cpu_spec
    if eq4_literal:
        terms = [cap * catalog[t].cpu_spec / target for t, cap in measured]
    else:
        terms = [cap / catalog[t].cpu_spec * target for t, cap in measured]
    return min(1.0, sum(terms) / len(terms)), Source.EXTRAPOLATED


def estimate_ram_capacity(vm_type: str, catalog: Mapping[str, VmTypeSpec], c: FleetConstants) -> float:
    return catalog[vm_type].ram / c.ram_max


def estimate_capacity(
    vm_type: str,
    catalog: Mapping[str, VmTypeSpec],
    repo: CapacityRepository,
    c: FleetConstants,
    eq4_literal: bool = False,
) -> CapacityEstimate:
    cpu, source = estimate_cpu_capacity(vm_type, catalog, repo, eq4_literal)
    return CapacityEstimate(cpu, estimate_ram_capacity(vm_type, catalog, c), source)
