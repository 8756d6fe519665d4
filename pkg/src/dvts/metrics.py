"""Monitoring samples, fleet-relative normalisation and training-sample filters."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

GB = 1024 ** 3
MB = 1024 ** 2


class InvalidSample(ValueError):
    """A monitoring sample violates its invariants or the fleet constants."""


@dataclass(frozen=True)
class FleetConstants:
    """Hardware maxima across every VM type the provider offers."""

    fr_max: float = 3.5
    n_max_cores: int = 1
    ram_max: float = 3.75 * GB

    def __post_init__(self):
        if self.fr_max <= 0:
            raise ValueError("fr_max must be positive")
        if self.n_max_cores < 1:
            raise ValueError("n_max_cores must be >= 1")
        if self.ram_max <= 0:
            raise ValueError("ram_max must be positive")

    @property
    def max_cpu(self) -> float:
        return self.n_max_cores * self.fr_max


@dataclass(frozen=True)
class MonitoringSample:
    timestamp: float
    vm_id: str
    vm_type: str
    users: int
    pct_idle: float
    pct_steal: float
    core_freqs: tuple[float, ...]
    active_memory: float
    disk_util: float = 0.0
    net_util: float = 0.0

    def __post_init__(self):
        # lists from JSON are frozen into tuples so samples stay hashable
        object.__setattr__(self, "core_freqs", tuple(float(f) for f in self.core_freqs))
        if self.users < 0:
            raise InvalidSample(f"negative user count {self.users}")
        if not (0.0 <= self.pct_idle <= 100.0 and 0.0 <= self.pct_steal <= 100.0):
            raise InvalidSample("pct_idle and pct_steal must lie in [0, 100]")
        if self.pct_idle + self.pct_steal > 100.0 + 1e-9:
            raise InvalidSample("pct_idle + pct_steal exceeds 100")
        if not self.core_freqs or min(self.core_freqs) <= 0:
            raise InvalidSample("core_freqs must be non-empty and positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["core_freqs"] = list(self.core_freqs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MonitoringSample":
        return cls(**d)


@dataclass(frozen=True)
class NormalizedSample:
    timestamp: float
    vm_id: str
    users: int
    cpu_capacity: float
    cpu_load: float
    ram_load: float
    disk_util: float = 0.0
    net_util: float = 0.0


class FilterReason(str, enum.Enum):
    OVERLOAD = "Overload"
    NEGLIGIBLE_LOAD = "NegligibleLoad"
    USER_COUNT_JUMP = "UserCountJump"
    ALREADY_WELL_PREDICTED = "AlreadyWellPredicted"
    ACCEPTED = "Accepted"


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    reason: FilterReason

    def __post_init__(self):
        if self.accepted != (self.reason is FilterReason.ACCEPTED):
            raise ValueError("reason must be Accepted iff accepted")


ACCEPT = FilterDecision(True, FilterReason.ACCEPTED)


@dataclass(frozen=True)
class FilterThresholds:
    """Cut-offs for discarding samples that say nothing about users -> resources."""

    overload: float = 0.70
    min_users: int = 25
    min_cpu: float = 0.10
    jump_low: float = 0.5
    jump_high: float = 1.5
    jump_window: int = 3
    well_predicted_rmse: float = 0.01


def _cpu_scale(s: MonitoringSample, c: FleetConstants) -> float:
    total = sum(s.core_freqs)
    if total > c.max_cpu * (1 + 1e-9):
        raise InvalidSample(
            f"sum of core frequencies {total:.3f} GHz exceeds n_max_cores*fr_max={c.max_cpu:.3f}"
        )
    return total / (100.0 * c.max_cpu)


def normalize_cpu_capacity(s: MonitoringSample, c: FleetConstants) -> float:
    return (100.0 - s.pct_steal) * _cpu_scale(s, c)


def normalize_cpu_load(s: MonitoringSample, c: FleetConstants) -> float:
    return max(0.0, 100.0 - s.pct_idle - s.pct_steal) * _cpu_scale(s, c)


def normalize_ram_load(active_memory: float, c: FleetConstants) -> float:
    if active_memory < 0:
        raise InvalidSample("active memory cannot be negative")
    if active_memory > c.ram_max * (1 + 1e-12):
        raise InvalidSample(f"active memory {active_memory:.0f} B exceeds ram_max {c.ram_max:.0f} B")
    return active_memory / c.ram_max


def normalize(s: MonitoringSample, c: FleetConstants) -> NormalizedSample:
    return NormalizedSample(
        timestamp=s.timestamp,
        vm_id=s.vm_id,
        users=s.users,
        cpu_capacity=normalize_cpu_capacity(s, c),
        cpu_load=normalize_cpu_load(s, c),
        ram_load=normalize_ram_load(s.active_memory, c),
        disk_util=s.disk_util,
        net_util=s.net_util,
    )


def normalize_arrays(
    pct_idle: np.ndarray,
    pct_steal: np.ndarray,
    freq_sum: np.ndarray,
    active_memory: np.ndarray,
    c: FleetConstants,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch form of :func:`normalize`: ``(cpu_capacity, cpu_load, ram_load)``.

    ``freq_sum`` is the per-sample sum of core frequencies. Inputs are
    validated as a whole; any invalid row raises :class:`InvalidSample`.
    """
    idle, steal, fsum, mem = (np.asarray(a, dtype=float) for a in (pct_idle, pct_steal, freq_sum, active_memory))
    if np.any((idle < 0) | (steal < 0) | (idle + steal > 100.0 + 1e-9)):
        raise InvalidSample("pct_idle/pct_steal out of range")
    if np.any((fsum <= 0) | (fsum > c.max_cpu * (1 + 1e-9))):
        raise InvalidSample("core frequency sum outside (0, n_max_cores*fr_max]")
    if np.any((mem < 0) | (mem > c.ram_max * (1 + 1e-12))):
        raise InvalidSample("active memory outside [0, ram_max]")
    scale = fsum / (100.0 * c.max_cpu)
    return (100.0 - steal) * scale, np.maximum(0.0, 100.0 - idle - steal) * scale, mem / c.ram_max


def filter_training_sample(
    s: NormalizedSample,
    capacity: tuple[float, float],
    recent_users: Sequence[int],
    rmse_pre: float | None = None,
    thresholds: FilterThresholds = FilterThresholds(),
) -> FilterDecision:
    """Decide whether ``s`` is usable as an ANN training sample.

    ``capacity`` is the VM's own (cpu, ram) capacity on the fleet scale, so
    utilisation is judged locally. Disk and network are raw percentages.
    ``recent_users`` holds the previous user counts reported by the same VM;
    the jump check needs a full window. ``rmse_pre=None`` skips the last check
    (the trainer applies it once the model is at hand).
    """
    cpu_cap, ram_cap = capacity
    cpu_rel = s.cpu_load / cpu_cap if cpu_cap > 0 else 1.0
    ram_rel = s.ram_load / ram_cap if ram_cap > 0 else 1.0
    t = thresholds

    if (
        cpu_rel > t.overload
        or ram_rel > t.overload
        or s.disk_util / 100.0 > t.overload
        or s.net_util / 100.0 > t.overload
    ):
        return FilterDecision(False, FilterReason.OVERLOAD)
    if s.users < t.min_users or cpu_rel < t.min_cpu:
        return FilterDecision(False, FilterReason.NEGLIGIBLE_LOAD)
    if len(recent_users) >= t.jump_window:
        window = list(recent_users)[-t.jump_window:]
        mean = sum(window) / len(window)
        if s.users < t.jump_low * mean or s.users > t.jump_high * mean:
            return FilterDecision(False, FilterReason.USER_COUNT_JUMP)
    if rmse_pre is not None and rmse_pre < t.well_predicted_rmse:
        return FilterDecision(False, FilterReason.ALREADY_WELL_PREDICTED)
    return ACCEPT


def write_samples(samples: Iterable[MonitoringSample], fh: IO[str]) -> int:
    n = 0
    for s in samples:
        fh.write(json.dumps(s.to_dict(), sort_keys=True))
        fh.write("\n")
        n += 1
    return n


def read_samples(source: str | Path | IO[str]) -> Iterator[MonitoringSample]:
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            yield from read_samples(fh)
        return
    for lineno, line in enumerate(source, 1):
        line = line.strip()
        if not line:
            continue
        try:
            yield MonitoringSample.from_dict(json.loads(line))
        except (TypeError, json.JSONDecodeError) as exc:
            raise InvalidSample(f"line {lineno}: {exc}") from exc
