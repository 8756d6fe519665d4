"""Single-region HTM: spatial pooler, temporal memory and anomaly score.

Spatial pooling keeps a dense permanence matrix restricted to each column's
potential pool. Temporal memory stores distal segments in flat padded arrays
(``seg_presyn``/``seg_w``) so segment activation is one vectorised gather per
step; per-segment learning is a short Python loop over the few segments that
learn each step.
"""

from __future__ import annotations

import copy
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .encoders import DateEncoderConfig, SampleEncoder, ScalarEncoderConfig

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class HtmConfig:
    column_count: int = 2048
    cells_per_column: int = 32
    potential_pool_fraction: float = 0.5
    active_column_fraction: float = 0.02
    permanence_threshold: float = 0.5
    permanence_increment: float = 0.05
    permanence_decrement: float = 0.008
    inhibition_radius: int = 0
    # distal (temporal memory) parameters
    segment_activation_threshold: int = 13
    segment_matching_threshold: int = 10
    initial_segment_weight: float = 0.21
    connected_segment_weight: float = 0.5
    segment_weight_increment: float = 0.1
    segment_weight_decay: float = 0.1
    new_synapse_count: int = 20
    max_synapses_per_segment: int = 32
    max_segments_per_cell: int = 128
    warmup_count: int = 110
    rng_seed: int = 42

    def __post_init__(self):
        for name in ("potential_pool_fraction", "active_column_fraction", "permanence_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.column_count < 100:
            raise ValueError("column_count must be >= 100")
        if self.cells_per_column < 1:
            raise ValueError("cells_per_column must be >= 1")
        if self.segment_matching_threshold > self.segment_activation_threshold:
            raise ValueError("matching threshold cannot exceed activation threshold")
        if self.new_synapse_count > self.max_synapses_per_segment:
            raise ValueError("new_synapse_count exceeds max_synapses_per_segment")

    @property
    def active_column_count(self) -> int:
        return max(1, int(round(self.active_column_fraction * self.column_count)))


@dataclass(frozen=True)
class AnomalyResult:
    score: float
    warmed_up: bool


class AnomalySource(Protocol):
    """Anything that turns a stream of samples into anomaly scores."""

    samples_seen: int

    def process_sample(self, timestamp: float, users: float, cpu: float, ram: float) -> AnomalyResult: ...

    def clone(self) -> "AnomalySource": ...


@dataclass
class NullAnomalySource:
    """Always reports zero anomaly; stands in for the HTM in isolation tests."""

    warmup_count: int = 0
    samples_seen: int = 0

    def process_sample(self, timestamp, users, cpu, ram) -> AnomalyResult:
        self.samples_seen += 1
        return AnomalyResult(0.0, self.samples_seen > self.warmup_count)

    def clone(self) -> "NullAnomalySource":
        return copy.deepcopy(self)


def anomaly_score(active_columns, predicted_cells, cells_per_column: int) -> float:
    """Fraction of active columns that held no predicted cell."""
    cols = np.unique(np.asarray(active_columns, dtype=np.int64))
    if cols.size == 0:
        return 0.0
    predicted_cols = np.unique(np.asarray(predicted_cells, dtype=np.int64) // cells_per_column)
    hit = np.isin(cols, predicted_cols).sum()
    return float(cols.size - hit) / cols.size


class HtmRegion:
    def __init__(self, config: HtmConfig | None = None, encoder: SampleEncoder | None = None):
        self.config = cfg = config or HtmConfig()
        self.encoder = encoder or SampleEncoder()
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.input_width = self.encoder.width
        self.samples_seen = 0
        self.iteration = 0

        C, W = cfg.column_count, self.input_width
        pool_size = max(1, int(round(cfg.potential_pool_fraction * W)))
        pick = np.argpartition(self.rng.random((C, W)), pool_size - 1, axis=1)[:, :pool_size]
        pool = np.zeros((C, W), dtype=bool)
        np.put_along_axis(pool, pick, True, axis=1)
        # roughly half the pool starts connected
        init = self.rng.uniform(cfg.permanence_threshold - 0.1, cfg.permanence_threshold + 0.1, (C, W))
        self.pool = pool
        self.perm = np.where(pool, np.clip(init, 0.0, 1.0), 0.0).astype(np.float32)
        # cached connectivity; perm is zero outside the pool so no mask is needed
        self.connected = self.perm > cfg.permanence_threshold

        self.n_cells = C * cfg.cells_per_column
        S = cfg.max_synapses_per_segment
        cap = 1024
        # empty synapse slots point at the sentinel cell ``n_cells``
        self.seg_presyn = np.full((cap, S), self.n_cells, dtype=np.int32)
        self.seg_w = np.zeros((cap, S), dtype=np.float32)
        self.seg_cell = np.full(cap, -1, dtype=np.int32)
        self.seg_last_used = np.zeros(cap, dtype=np.int64)
        self.n_segments = 0
        self.cell_nseg = np.zeros(self.n_cells, dtype=np.int32)

        self.active_cells = np.zeros(0, dtype=np.int64)
        self.winner_cells = np.zeros(0, dtype=np.int64)
        self.predicted_cells = np.zeros(0, dtype=np.int64)
        self.active_segments = np.zeros(0, dtype=np.int64)
        self.matching_segments = np.zeros(0, dtype=np.int64)
        self.seg_potential = np.zeros(cap, dtype=np.int32)

    # spatial pooling

    def overlaps(self, bits: np.ndarray) -> np.ndarray:
        on = np.flatnonzero(bits)
        if on.size == 0:
            return np.zeros(self.config.column_count, dtype=np.int64)
        return self.connected[:, on].sum(axis=1)

    def _inhibit(self, overlap: np.ndarray) -> np.ndarray:
        k = self.config.active_column_count
        order = np.argsort(-overlap, kind="stable")
        r = self.config.inhibition_radius
        if r <= 0:
            return np.sort(order[:k])
        chosen: list[int] = []
        for c in order:
            if all(abs(int(c) - s) > r for s in chosen):
                chosen.append(int(c))
                if len(chosen) == k:
                    break
        return np.array(sorted(chosen), dtype=np.int64)

    def spatial_pool(self, bits: np.ndarray, learn: bool = True) -> np.ndarray:
        bits = np.asarray(bits, dtype=bool)
        if bits.shape != (self.input_width,):
            raise ValueError(f"input width {bits.shape} != {self.input_width}")
        active = self._inhibit(self.overlaps(bits))
        if learn:
            cfg = self.config
            delta = np.where(bits, cfg.permanence_increment, -cfg.permanence_decrement).astype(np.float32)
            rows = np.clip(self.perm[active] + self.pool[active] * delta, 0.0, 1.0)
            self.perm[active] = rows
            self.connected[active] = rows > cfg.permanence_threshold
        return active

    # temporal memory

    def _grow_capacity(self) -> None:
        cap = self.seg_cell.size * 2
        S = self.config.max_synapses_per_segment

        def grow(a, fill, shape):
            out = np.full(shape, fill, dtype=a.dtype)
            out[: a.shape[0]] = a
            return out

        self.seg_presyn = grow(self.seg_presyn, self.n_cells, (cap, S))
        self.seg_w = grow(self.seg_w, 0.0, (cap, S))
        self.seg_cell = grow(self.seg_cell, -1, (cap,))
        self.seg_last_used = grow(self.seg_last_used, 0, (cap,))
        self.seg_potential = grow(self.seg_potential, 0, (cap,))

    def _new_segment(self, cell: int) -> int:
        if self.cell_nseg[cell] >= self.config.max_segments_per_cell:
            # recycle the least recently used segment of this cell
            own = np.flatnonzero(self.seg_cell[: self.n_segments] == cell)
            s = int(own[np.argmin(self.seg_last_used[own])])
            self.seg_presyn[s] = self.n_cells
            self.seg_w[s] = 0.0
        else:
            if self.n_segments == self.seg_cell.size:
                self._grow_capacity()
            s = self.n_segments
            self.n_segments += 1
            self.seg_cell[s] = cell
            self.cell_nseg[cell] += 1
        self.seg_last_used[s] = self.iteration
        return s

    def _adapt(self, segs: np.ndarray, prev_active: np.ndarray) -> None:
        """Reinforce synapses from previously active cells, decay the rest."""
        cfg = self.config
        pre = self.seg_presyn[segs]
        valid = pre != self.n_cells
        hit = prev_active[pre]
        w = self.seg_w[segs]
        w += np.where(hit, cfg.segment_weight_increment, -cfg.segment_weight_decay).astype(np.float32) * valid
        np.clip(w, 0.0, 1.0, out=w)
        dead = valid & (w <= 0.0)
        pre[dead] = self.n_cells
        self.seg_presyn[segs] = pre
        self.seg_w[segs] = w
        self.seg_last_used[segs] = self.iteration

    def _grow(self, s: int, candidates: np.ndarray, n_new: int) -> None:
        if n_new <= 0 or candidates.size == 0:
            return
        pre = self.seg_presyn[s]
        cand = candidates[~np.isin(candidates, pre)]
        if cand.size == 0:
            return
        if cand.size > n_new:
            cand = self.rng.choice(cand, n_new, replace=False)
        w = self.seg_w[s]
        free = np.flatnonzero(pre == self.n_cells)
        if free.size < cand.size:
            # make room by dropping the weakest synapses
            used = np.flatnonzero(pre != self.n_cells)
            drop = used[np.argsort(w[used], kind="stable")[: cand.size - free.size]]
            pre[drop] = self.n_cells
            w[drop] = 0.0
            free = np.flatnonzero(pre == self.n_cells)
        slots = free[: cand.size]
        pre[slots] = cand
        w[slots] = self.config.initial_segment_weight

    def temporal_step(self, active_columns: np.ndarray, learn: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Activate cells for ``active_columns`` and compute the next predictions.

        Returns ``(active_cells, predicted_cells)``, both sorted cell indices.
        """
        cfg = self.config
        cpc = cfg.cells_per_column
        cols = np.unique(np.asarray(active_columns, dtype=np.int64))
        if cols.size and (cols[0] < 0 or cols[-1] >= cfg.column_count):
            raise ValueError("active column index out of range")

        prev_active = np.zeros(self.n_cells + 1, dtype=bool)
        prev_active[self.active_cells] = True
        prev_winners = self.winner_cells

        act_seg_cols = self.seg_cell[self.active_segments] // cpc
        match_seg_cols = self.seg_cell[self.matching_segments] // cpc

        has_pred = np.isin(cols, act_seg_cols)
        learning = self.active_segments[np.isin(act_seg_cols, cols)]
        predicted_active = np.unique(self.seg_cell[learning]).astype(np.int64)
        active_cells = [predicted_active]
        winners = [predicted_active]
        grow_segs = [learning]

        for c in cols[~has_pred]:
            active_cells.append(np.arange(c * cpc, (c + 1) * cpc, dtype=np.int64))
            msegs = self.matching_segments[match_seg_cols == c]
            if msegs.size:
                best = msegs[np.argmax(self.seg_potential[msegs])]
                winners.append(self.seg_cell[best : best + 1].astype(np.int64))
                grow_segs.append(np.array([best]))
                continue
            counts = self.cell_nseg[c * cpc : (c + 1) * cpc]
            least = np.flatnonzero(counts == counts.min())
            winner = int(c * cpc + least[self.rng.integers(least.size)])
            winners.append(np.array([winner], dtype=np.int64))
            if learn and prev_winners.size:
                s = self._new_segment(winner)
                self._grow(s, prev_winners, cfg.new_synapse_count)

        if learn:
            segs = np.concatenate(grow_segs).astype(np.int64)
            if segs.size:
                self._adapt(segs, prev_active)
                for s in segs[self.seg_potential[segs] < cfg.new_synapse_count]:
                    self._grow(int(s), prev_winners, cfg.new_synapse_count - int(self.seg_potential[s]))

        self.active_cells = np.sort(np.concatenate(active_cells))
        self.winner_cells = np.unique(np.concatenate(winners))
        self._compute_predictions()
        self.iteration += 1
        return self.active_cells, self.predicted_cells

    def _compute_predictions(self) -> None:
        cfg = self.config
        n = self.n_segments
        if n == 0 or self.active_cells.size == 0:
            self.active_segments = np.zeros(0, dtype=np.int64)
            self.matching_segments = np.zeros(0, dtype=np.int64)
            self.predicted_cells = np.zeros(0, dtype=np.int64)
            return
        active = np.zeros(self.n_cells + 1, dtype=bool)
        active[self.active_cells] = True
        hit = active[self.seg_presyn[:n]]
        w = self.seg_w[:n]
        connected = (hit & (w >= cfg.connected_segment_weight)).sum(axis=1)
        potential = (hit & (w > 0.0)).sum(axis=1)
        self.seg_potential[:n] = potential
        self.active_segments = np.flatnonzero(connected >= cfg.segment_activation_threshold)
        self.matching_segments = np.flatnonzero(potential >= cfg.segment_matching_threshold)
        self.predicted_cells = np.unique(self.seg_cell[self.active_segments]).astype(np.int64)

    # whole pipeline

    def process_sample(self, timestamp: float, users: float, cpu: float, ram: float) -> AnomalyResult:
        bits = self.encoder.encode(timestamp, users, cpu, ram)
        cols = self.spatial_pool(bits, learn=True)
        score = anomaly_score(cols, self.predicted_cells, self.config.cells_per_column)
        self.temporal_step(cols, learn=True)
        self.samples_seen += 1
        return AnomalyResult(score, self.samples_seen > self.config.warmup_count)

    def clone(self) -> "HtmRegion":
        return copy.deepcopy(self)

    # snapshots

    _ARRAYS = (
        "pool", "perm", "connected", "seg_presyn", "seg_w", "seg_cell", "seg_last_used", "seg_potential",
        "cell_nseg", "active_cells", "winner_cells", "predicted_cells", "active_segments", "matching_segments",
    )

    def save(self, target: str | Path | io.BytesIO) -> None:
        """Write a versioned binary (npz) snapshot."""
        meta = {
            "kind": "htm",
            "version": SNAPSHOT_VERSION,
            "config": asdict(self.config),
            "encoder": asdict(self.encoder),
            "samples_seen": self.samples_seen,
            "iteration": self.iteration,
            "n_segments": self.n_segments,
            "rng": self.rng.bit_generator.state,
        }
        arrays = {name: getattr(self, name) for name in self._ARRAYS}
        np.savez_compressed(target, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, source: str | Path | io.BytesIO) -> "HtmRegion":
        with np.load(source, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("kind") != "htm" or meta.get("version") != SNAPSHOT_VERSION:
                raise ValueError("not a version-1 HTM snapshot")
            r = cls.__new__(cls)
            r.config = HtmConfig(**meta["config"])
            enc = meta["encoder"]
            r.encoder = SampleEncoder(
                date=DateEncoderConfig(**enc["date"]),
                users=ScalarEncoderConfig(**enc["users"]),
                cpu=ScalarEncoderConfig(**enc["cpu"]),
                ram=ScalarEncoderConfig(**enc["ram"]),
            )
            r.input_width = r.encoder.width
            r.n_cells = r.config.column_count * r.config.cells_per_column
            r.samples_seen = meta["samples_seen"]
            r.iteration = meta["iteration"]
            r.n_segments = meta["n_segments"]
            r.rng = np.random.default_rng()
            r.rng.bit_generator.state = meta["rng"]
            for name in cls._ARRAYS:
                setattr(r, name, z[name].copy())
        return r


def clone_region(region: HtmRegion) -> HtmRegion:
    return region.clone()
