"""Scalar and date encoders producing fixed-width sparse bit vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SECONDS_PER_DAY = 86400.0


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class ScalarEncoderConfig:
    min_value: float
    max_value: float
    active_bits: int = 21
    total_bits: int = 512
    clip_out_of_range: bool = True
    periodic: bool = False

    def __post_init__(self):
        if not 0 < self.active_bits < self.total_bits:
            raise ValueError("need 0 < active_bits < total_bits")
        if not self.min_value < self.max_value:
            raise ValueError("need min_value < max_value")


def encode_scalar(value: float, cfg: ScalarEncoderConfig) -> np.ndarray:
    """Contiguous run of ``active_bits`` ones placed proportionally to ``value``.

    Periodic encoders wrap the run around the end of the vector, so the
    maximum and minimum of the domain coincide.
    """
    v = float(value)
    if not np.isfinite(v):
        raise EncodingError(f"cannot encode {value!r}")
    lo, hi = cfg.min_value, cfg.max_value
    n, w = cfg.total_bits, cfg.active_bits
    out = np.zeros(n, dtype=bool)
    if cfg.periodic:
        frac = ((v - lo) / (hi - lo)) % 1.0
        start = int(frac * n) % n
        out[(start + np.arange(w)) % n] = True
        return out
    if v < lo or v > hi:
        if not cfg.clip_out_of_range:
            raise EncodingError(f"{v} outside [{lo}, {hi}]")
        v = min(max(v, lo), hi)
    start = int(round((v - lo) / (hi - lo) * (n - w)))
    out[start:start + w] = True
    return out


@dataclass(frozen=True)
class DateEncoderConfig:
    """Time-of-day field, plus an optional day-of-week field (0 bits = off).

    Timestamps are seconds since the Unix epoch, read as UTC.
    """

    time_of_day_bits: int = 128
    time_of_day_width: int = 21
    day_of_week_bits: int = 0
    day_of_week_width: int = 3

    @property
    def fields(self) -> list[tuple[str, ScalarEncoderConfig]]:
        out = [("time_of_day", ScalarEncoderConfig(0.0, 24.0, self.time_of_day_width, self.time_of_day_bits, periodic=True))]
        if self.day_of_week_bits:
            out.append(("day_of_week", ScalarEncoderConfig(0.0, 7.0, self.day_of_week_width, self.day_of_week_bits, periodic=True)))
        return out

    @property
    def total_bits(self) -> int:
        return sum(c.total_bits for _, c in self.fields)


def encode_date(timestamp: float, cfg: DateEncoderConfig) -> np.ndarray:
    t = float(timestamp)
    hours = (t % SECONDS_PER_DAY) / 3600.0
    # 1970-01-01 was a Thursday; Monday is day 0
    weekday = ((t // SECONDS_PER_DAY) + 3) % 7 + hours / 24.0
    values = {"time_of_day": hours, "day_of_week": weekday}
    return np.concatenate([encode_scalar(values[name], c) for name, c in cfg.fields])


@dataclass(frozen=True)
class SampleEncoder:
    """Date, users, cpu and ram encodings concatenated in that order."""

    date: DateEncoderConfig = field(default_factory=DateEncoderConfig)
    users: ScalarEncoderConfig = field(default_factory=lambda: ScalarEncoderConfig(0.0, 1000.0))
    cpu: ScalarEncoderConfig = field(default_factory=lambda: ScalarEncoderConfig(0.0, 1.0))
    ram: ScalarEncoderConfig = field(default_factory=lambda: ScalarEncoderConfig(0.0, 1.0))

    @property
    def width(self) -> int:
        return self.date.total_bits + self.users.total_bits + self.cpu.total_bits + self.ram.total_bits

    def segments(self) -> dict[str, slice]:
        """Bit range owned by each field, for diagnostics and tests."""
        out, pos = {}, 0
        for name, n in (
            ("date", self.date.total_bits),
            ("users", self.users.total_bits),
            ("cpu", self.cpu.total_bits),
            ("ram", self.ram.total_bits),
        ):
            out[name] = slice(pos, pos + n)
            pos += n
        return out

    def encode(self, timestamp: float, users: float, cpu: float, ram: float) -> np.ndarray:
        return np.concatenate(
            [
                encode_date(timestamp, self.date),
                encode_scalar(users, self.users),
                encode_scalar(cpu, self.cpu),
                encode_scalar(ram, self.ram),
            ]
        )


def encode_sample(timestamp: float, users: float, cpu: float, ram: float, encoder: SampleEncoder | None = None) -> np.ndarray:
    return (encoder or SampleEncoder()).encode(timestamp, users, cpu, ram)
