import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dvts.metrics import (
    GB,
    FilterReason,
    FleetConstants,
    InvalidSample,
    MonitoringSample,
    NormalizedSample,
    filter_training_sample,
    normalize,
    normalize_arrays,
    normalize_cpu_capacity,
    normalize_cpu_load,
    normalize_ram_load,
    read_samples,
    write_samples,
)

C1 = FleetConstants(fr_max=3.5, n_max_cores=1, ram_max=3.75 * GB)
C2 = FleetConstants(fr_max=3.5, n_max_cores=2, ram_max=3.75 * GB)


def sample(idle=50.0, steal=10.0, freqs=(2.8,), mem=1.0 * GB, users=100, **kw):
    return MonitoringSample(0.0, "vm-00", "m1.small", users, idle, steal, freqs, mem, **kw)


def nsample(users=100, cpu_cap=0.5, cpu=0.2, ram=0.2, disk=5.0, net=5.0):
    return NormalizedSample(0.0, "vm-00", users, cpu_cap, cpu, ram, disk, net)


# Eq. 1-3 worked values

def test_cpu_capacity_examples():
    assert normalize_cpu_capacity(sample(idle=0, steal=0, freqs=(3.5,)), C1) == pytest.approx(1.0)
    assert normalize_cpu_capacity(sample(idle=0, steal=100, freqs=(2.0,)), C1) == 0.0
    assert normalize_cpu_capacity(sample(idle=0, steal=50, freqs=(2.8,)), C2) == pytest.approx(0.2)


def test_cpu_load_examples():
    assert normalize_cpu_load(sample(idle=100, steal=0), C1) == 0.0
    assert normalize_cpu_load(sample(idle=0, steal=0, freqs=(3.5,)), C1) == pytest.approx(1.0)
    assert normalize_cpu_load(sample(idle=30, steal=20, freqs=(2.8,)), C2) == pytest.approx(0.2)


def test_ram_load_examples():
    assert normalize_ram_load(3.75 * GB, C1) == 1.0
    assert normalize_ram_load(1.875 * GB, C1) == pytest.approx(0.5)
    assert normalize_ram_load(0.85 * GB, C1) == pytest.approx(0.85 / 3.75)


def test_invalid_samples_rejected():
    with pytest.raises(InvalidSample):
        sample(idle=60, steal=50)
    with pytest.raises(InvalidSample):
        sample(freqs=())
    with pytest.raises(InvalidSample):
        sample(users=-1)
    with pytest.raises(InvalidSample):
        normalize(sample(freqs=(3.6,)), C1)
    with pytest.raises(InvalidSample):
        normalize_ram_load(4 * GB, C1)


valid_samples = st.builds(
    lambda idle, steal_frac, freqs, mem_frac: sample(
        idle=idle, steal=(100 - idle) * steal_frac, freqs=tuple(freqs), mem=mem_frac * C2.ram_max
    ),
    st.floats(0, 100),
    st.floats(0, 1),
    st.lists(st.floats(0.1, 3.5), min_size=1, max_size=2),
    st.floats(0, 1),
)


@given(valid_samples)
def test_normalised_values_bounded(s):
    n = normalize(s, C2)
    assert 0.0 <= n.cpu_load <= n.cpu_capacity <= 1.0
    assert 0.0 <= n.ram_load <= 1.0


@given(valid_samples, st.floats(0, 50))
def test_more_steal_never_raises_cpu(s, extra):
    if s.pct_idle + s.pct_steal + extra > 100:
        return
    more = sample(idle=s.pct_idle, steal=s.pct_steal + extra, freqs=s.core_freqs, mem=s.active_memory)
    assert normalize_cpu_capacity(more, C2) <= normalize_cpu_capacity(s, C2) + 1e-12
    assert normalize_cpu_load(more, C2) <= normalize_cpu_load(s, C2) + 1e-12


@given(valid_samples, st.floats(0, 50))
def test_more_idle_never_raises_load(s, extra):
    if s.pct_idle + s.pct_steal + extra > 100:
        return
    more = sample(idle=s.pct_idle + extra, steal=s.pct_steal, freqs=s.core_freqs, mem=s.active_memory)
    assert normalize_cpu_load(more, C2) <= normalize_cpu_load(s, C2) + 1e-12


def test_batch_normalisation_matches_scalar():
    rng = np.random.default_rng(3)
    n = 500
    idle = rng.uniform(0, 100, n)
    steal = rng.uniform(0, 1, n) * (100 - idle)
    freqs = rng.uniform(0.1, 3.5, (n, 2))
    mem = rng.uniform(0, 1, n) * C2.ram_max
    cap, load, ram = normalize_arrays(idle, steal, freqs.sum(axis=1), mem, C2)
    for i in range(n):
        s = normalize(sample(idle=idle[i], steal=steal[i], freqs=tuple(freqs[i]), mem=mem[i]), C2)
        assert (cap[i], load[i], ram[i]) == pytest.approx((s.cpu_capacity, s.cpu_load, s.ram_load), abs=1e-12)


def test_batch_normalisation_validates():
    with pytest.raises(InvalidSample):
        normalize_arrays([60.0], [50.0], [2.0], [0.0], C1)
    with pytest.raises(InvalidSample):
        normalize_arrays([0.0], [0.0], [4.0], [0.0], C1)


# training filters

def test_filter_examples():
    cap = (0.5, 0.5)
    assert filter_training_sample(nsample(users=24), cap, []).reason is FilterReason.NEGLIGIBLE_LOAD
    assert filter_training_sample(nsample(users=300), cap, [100, 100, 100]).reason is FilterReason.USER_COUNT_JUMP
    ok = filter_training_sample(nsample(users=100, cpu=0.2, ram=0.2), cap, [100, 100, 100], rmse_pre=0.05)
    assert ok.accepted and ok.reason is FilterReason.ACCEPTED


def test_filter_precedence():
    cap = (0.5, 0.5)
    # overloaded and negligible at once: overload wins
    assert filter_training_sample(nsample(users=5, cpu=0.4), cap, []).reason is FilterReason.OVERLOAD
    # negligible and jumping: negligible wins
    assert filter_training_sample(nsample(users=10), cap, [100, 100, 100]).reason is FilterReason.NEGLIGIBLE_LOAD
    # jumping and well predicted: jump wins
    assert filter_training_sample(nsample(users=300), cap, [100] * 3, rmse_pre=0.001).reason is FilterReason.USER_COUNT_JUMP
    assert filter_training_sample(nsample(), cap, [100] * 3, rmse_pre=0.001).reason is FilterReason.ALREADY_WELL_PREDICTED


def test_overload_is_relative_to_own_capacity():
    # 0.3 fleet-normalised CPU is 75% of a 0.4 capacity VM
    assert filter_training_sample(nsample(cpu=0.3, cpu_cap=0.4), (0.4, 1.0), []).reason is FilterReason.OVERLOAD
    assert filter_training_sample(nsample(cpu=0.3, cpu_cap=1.0), (1.0, 1.0), []).accepted
    assert filter_training_sample(nsample(ram=0.4), (0.5, 0.45), []).reason is FilterReason.OVERLOAD


def test_overload_disk_and_net_raw_percent():
    assert filter_training_sample(nsample(disk=71), (0.5, 0.5), []).reason is FilterReason.OVERLOAD
    assert filter_training_sample(nsample(net=71), (0.5, 0.5), []).reason is FilterReason.OVERLOAD


def test_jump_filter_skipped_until_window_full():
    assert filter_training_sample(nsample(users=300), (0.5, 0.5), [100, 100]).accepted


def test_jump_bounds_inclusive():
    cap = (0.5, 0.5)
    assert filter_training_sample(nsample(users=150), cap, [100] * 3).accepted
    assert filter_training_sample(nsample(users=50), cap, [100] * 3).accepted
    assert not filter_training_sample(nsample(users=151), cap, [100] * 3).accepted
    # only the last three counts matter
    assert filter_training_sample(nsample(users=100), cap, [1, 100, 100, 100]).accepted


@given(st.integers(0, 500), st.floats(0, 1), st.floats(0, 1), st.lists(st.integers(0, 500), max_size=5))
def test_filter_is_pure(users, cpu, ram, recent):
    s = nsample(users=users, cpu=cpu, ram=ram, cpu_cap=1.0)
    assert filter_training_sample(s, (1.0, 1.0), recent) == filter_training_sample(s, (1.0, 1.0), list(recent))


def test_sample_roundtrip():
    samples = [sample(users=u) for u in (10, 20, 30)]
    buf = io.StringIO()
    assert write_samples(samples, buf) == 3
    buf.seek(0)
    assert list(read_samples(buf)) == samples


def test_read_samples_reports_line():
    with pytest.raises(InvalidSample, match="line 2"):
        list(read_samples(io.StringIO('{"timestamp": 0, "vm_id": "a", "vm_type": "t", "users": 1, "pct_idle": 1,'
                                      ' "pct_steal": 1, "core_freqs": [1], "active_memory": 1}\n{"bad": 1}\n')))


def test_constants_validate():
    with pytest.raises(ValueError):
        FleetConstants(fr_max=0)
    assert C2.max_cpu == 7.0
    assert math.isclose(C1.ram_max, 3.75 * GB)
