"""Online learning pipeline fed by monitoring samples.

Each sample is normalised, its CPU capacity goes to the repository, the VM's
anomaly detector scores it, and if it passes the training filters the shared
regression network learns from it. The engine also assembles selector inputs.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Mapping, Sequence

from .ann import AnnModel, TrainerState, TrainOutcome, train
from .capacity import (
    CapacityRecord,
    CapacityRepository,
    VmTypeSpec,
    catalog_by_name,
    estimate_capacity,
    estimate_ram_capacity,
)
from .htm import AnomalyResult, AnomalySource
from .metrics import FilterReason, FilterThresholds, FleetConstants, MonitoringSample, NormalizedSample, filter_training_sample, normalize
from .selector import SelectionInput, SelectionResult, select_vm_type


@dataclass(frozen=True)
class Observation:
    sample: NormalizedSample
    anomaly: AnomalyResult | None
    reason: FilterReason
    outcome: TrainOutcome | None = None


class LearningEngine:
    def __init__(
        self,
        catalog: Sequence[VmTypeSpec],
        constants: FleetConstants = FleetConstants(),
        ann: AnnModel | None = None,
        trainer: TrainerState | None = None,
        repository: CapacityRepository | None = None,
        thresholds: FilterThresholds = FilterThresholds(),
        eq4_literal: bool = False,
        learn: bool = True,
    ):
        self.catalog = list(catalog)
        self.catalog_map = catalog_by_name(self.catalog)
        self.constants = constants
        self.ann = ann or AnnModel()
        self.trainer = trainer or TrainerState()
        self.repository = repository or CapacityRepository()
        self.thresholds = thresholds
        self.eq4_literal = eq4_literal
        self.learn = learn
        self.recent_users: dict[str, deque] = defaultdict(lambda: deque(maxlen=thresholds.jump_window))
        self.reasons: dict[str, int] = defaultdict(int)

    def ram_capacity(self, vm_type: str) -> float:
        return estimate_ram_capacity(vm_type, self.catalog_map, self.constants)

    def observe(self, raw: MonitoringSample, detector: AnomalySource | None) -> Observation:
        s = normalize(raw, self.constants)
        self.repository.record(CapacityRecord(s.timestamp, raw.vm_type, raw.vm_id, s.cpu_capacity))
        if not self.learn:
            return Observation(s, None, FilterReason.ACCEPTED)

        anomaly = detector.process_sample(s.timestamp, s.users, s.cpu_load, s.ram_load) if detector else None
        recent = self.recent_users[raw.vm_id]
        decision = filter_training_sample(
            s, (s.cpu_capacity, self.ram_capacity(raw.vm_type)), list(recent), thresholds=self.thresholds
        )
        recent.append(s.users)

        outcome = None
        reason = decision.reason
        if decision.accepted and anomaly is not None and not anomaly.warmed_up:
            # the detector's first scores are not trusted; nothing is learnt yet
            self.reasons["WarmUp"] += 1
            return Observation(s, anomaly, reason, None)
        if decision.accepted:
            outcome = train(self.ann, self.trainer, s, anomaly.score if anomaly else 0.0, self.thresholds.well_predicted_rmse)
            if outcome.filtered:
                reason = FilterReason.ALREADY_WELL_PREDICTED
        self.reasons[reason.value] += 1
        return Observation(s, anomaly, reason, outcome)

    def selection_input(self, delta: int = 5, candidates: Sequence[VmTypeSpec] | None = None) -> SelectionInput:
        if not self.trainer.trained:
            raise RuntimeError("regression model has not been trained yet")
        cands = list(candidates or self.catalog)
        caps = {
            t.name: estimate_capacity(t.name, self.catalog_map, self.repository, self.constants, self.eq4_literal)
            for t in cands
        }
        return SelectionInput(
            candidates=cands,
            ann=self.ann.copy(),
            capacities=caps,
            min_users=int(self.trainer.min_users),
            max_users=int(self.trainer.max_users),
            delta=delta,
        )

    def select(self, delta: int = 5, fallback: str | None = None) -> SelectionResult:
        """Run the selector; before any training, return ``fallback`` if one is given."""
        if not self.trainer.trained and fallback is not None:
            return SelectionResult(fallback, fallback=True)
        return select_vm_type(self.selection_input(delta))

    def filter_counts(self) -> Mapping[str, int]:
        return dict(self.reasons)
