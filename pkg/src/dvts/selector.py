"""Cheapest-per-user VM type selection on top of the learned utilisation model.

``predict_utilisation`` answers "what would n users cost in CPU and RAM",
extrapolating linearly past the largest user count the model was trained on.
``select_vm_type`` walks n upwards for every candidate type until the
prediction no longer fits the type's capacity, then prices each type per user.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .capacity import CapacityEstimate, VmTypeSpec

PROBE_LIMIT = 100_000
_CHUNK = 2048


class SelectionInfeasible(RuntimeError):
    """No candidate type can serve even ``min_users``."""


class UtilisationModel(Protocol):
    def forward(self, users) -> np.ndarray: ...


def predict_many(ann: UtilisationModel, n: np.ndarray, min_users: float, max_users: float) -> np.ndarray:
    """Vectorised utilisation estimate; returns shape ``(len(n), 2)`` clamped to [0, 1]."""
    if min_users > max_users:
        raise ValueError("min_users must not exceed max_users")
    n = np.asarray(n, dtype=float)
    out = np.empty((n.size, 2))
    inside = n < max_users
    if inside.any():
        out[inside] = ann.forward(n[inside])
    if (~inside).any():
        lo, hi = ann.forward(np.array([min_users, max_users], dtype=float))
        if max_users == min_users:
            out[~inside] = hi
        else:
            per_user = (hi - lo) / (max_users - min_users)
            # the ram line starts from the ram estimate at max_users
            out[~inside] = hi + np.outer(n[~inside] - max_users, per_user)
    return np.clip(out, 0.0, 1.0)


def predict_utilisation(ann: UtilisationModel, n: float, min_users: float, max_users: float) -> tuple[float, float]:
    cpu, ram = predict_many(ann, np.array([n]), min_users, max_users)[0]
    return float(cpu), float(ram)


@dataclass(frozen=True)
class SelectionInput:
    candidates: Sequence[VmTypeSpec]
    ann: UtilisationModel
    capacities: Mapping[str, CapacityEstimate]
    min_users: int
    max_users: int
    delta: int = 5
    probe_limit: int = PROBE_LIMIT

    def __post_init__(self):
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if self.min_users > self.max_users:
            raise ValueError("min_users must not exceed max_users")
        if not self.candidates:
            raise ValueError("no candidate types")
        missing = [t.name for t in self.candidates if t.name not in self.capacities]
        if missing:
            raise ValueError(f"no capacity estimate for {missing}")


@dataclass(frozen=True)
class TypeAssessment:
    user_capacity: int
    cost_per_user: float
    cpu_capacity: float
    ram_capacity: float


@dataclass(frozen=True)
class SelectionResult:
    chosen_type: str
    table: dict[str, TypeAssessment] = field(default_factory=dict)
    fallback: bool = False  # chosen without consulting the model

    def to_record(self, timestamp: float | None = None) -> dict:
        rows = {
            name: {
                "user_capacity": a.user_capacity,
                "cost_per_user": None if math.isinf(a.cost_per_user) else a.cost_per_user,
                "cpu_capacity": a.cpu_capacity,
                "ram_capacity": a.ram_capacity,
            }
            for name, a in sorted(self.table.items())
        }
        return {"timestamp": timestamp, "chosen_type": self.chosen_type, "fallback": self.fallback, "types": rows}


def _fits(pred: np.ndarray, cap: CapacityEstimate) -> np.ndarray:
    return (pred[:, 0] < cap.cpu_capacity) & (pred[:, 1] < cap.ram_capacity)


def _user_capacity(inp: SelectionInput, cap: CapacityEstimate, step: int) -> int:
    """Last probed n that fits before the first one that does not; 0 if minU fails.

    Probes are evaluated in chunks but the answer is the same as walking
    n = minU, minU+step, ... one at a time.
    """
    last = 0
    start = inp.min_users
    while start <= inp.probe_limit:
        n = np.arange(start, min(start + step * _CHUNK, inp.probe_limit + 1), step)
        ok = _fits(predict_many(inp.ann, n, inp.min_users, inp.max_users), cap)
        bad = np.flatnonzero(~ok)
        if bad.size:
            return int(n[bad[0] - 1]) if bad[0] > 0 else last
        last = int(n[-1])
        start = last + step
    return last


def _choose(inp: SelectionInput, step: int) -> SelectionResult:
    table = {}
    for t in inp.candidates:
        cap = inp.capacities[t.name]
        users = _user_capacity(inp, cap, step)
        cost = t.cost_per_hour / users if users > 0 else math.inf
        table[t.name] = TypeAssessment(users, cost, cap.cpu_capacity, cap.ram_capacity)
    feasible = [t for t in inp.candidates if table[t.name].user_capacity > 0]
    if not feasible:
        raise SelectionInfeasible(f"no type can serve {inp.min_users} users")
    best = min(feasible, key=lambda t: (table[t.name].cost_per_user, t.cost_per_hour, t.name))
    return SelectionResult(best.name, table)


def select_vm_type(inp: SelectionInput) -> SelectionResult:
    return _choose(inp, inp.delta)


def select_vm_type_bruteforce(inp: SelectionInput) -> SelectionResult:
    """Reference scan with unit steps; a test oracle for ``select_vm_type``."""
    table = {}
    for t in inp.candidates:
        cap = inp.capacities[t.name]
        n = np.arange(inp.min_users, inp.probe_limit + 1)
        ok = np.concatenate(
            [_fits(predict_many(inp.ann, n[i:i + 50_000], inp.min_users, inp.max_users), cap) for i in range(0, n.size, 50_000)]
        )
        first_bad = np.flatnonzero(~ok)
        if first_bad.size == 0:
            users = int(n[-1])
        else:
            users = int(n[first_bad[0] - 1]) if first_bad[0] > 0 else 0
        cost = t.cost_per_hour / users if users > 0 else math.inf
        table[t.name] = TypeAssessment(users, cost, cap.cpu_capacity, cap.ram_capacity)
    feasible = [t for t in inp.candidates if table[t.name].user_capacity > 0]
    if not feasible:
        raise SelectionInfeasible(f"no type can serve {inp.min_users} users")
    best = min(feasible, key=lambda t: (table[t.name].cost_per_user, t.cost_per_hour, t.name))
    return SelectionResult(best.name, table)
