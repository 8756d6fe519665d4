import pytest

from dvts.ann import AnnModel
from dvts.capacity import TABLE1_CATALOG
from dvts.engine import LearningEngine
from dvts.htm import NullAnomalySource
from dvts.metrics import GB, FilterReason, MonitoringSample


def raw(users, t=0.0, idle=60.0, steal=10.0, mem=1.0 * GB, vm_id="vm-00", vm_type="m1.small"):
    return MonitoringSample(t, vm_id, vm_type, users, idle, steal, (2.0,), mem)


def engine(**kw):
    return LearningEngine(TABLE1_CATALOG, ann=AnnModel(user_scale=10, seed=0), **kw)


def test_learning_off_records_capacity_only():
    e = engine(learn=False)
    for i in range(5):
        e.observe(raw(100, t=5.0 * i), NullAnomalySource())
    assert e.trainer.k == 0 and e.filter_counts() == {}
    assert len(e.repository) == 5


def test_warm_up_blocks_training():
    e = engine()
    det = NullAnomalySource(warmup_count=3)
    obs = [e.observe(raw(100, t=5.0 * i), det) for i in range(5)]
    assert [o.outcome is None for o in obs] == [True, True, True, False, False]
    assert e.filter_counts()["WarmUp"] == 3
    assert e.trainer.k == 2


def test_filter_counts_tally_reasons():
    e = engine()
    det = NullAnomalySource()
    e.observe(raw(10), det)
    e.observe(raw(100, idle=5.0), det)  # busy beyond 70% of own capacity
    e.observe(raw(100), det)
    counts = e.filter_counts()
    assert counts[FilterReason.NEGLIGIBLE_LOAD.value] == 1
    assert counts[FilterReason.OVERLOAD.value] == 1
    assert counts[FilterReason.ACCEPTED.value] == 1


def test_user_history_is_per_vm():
    e = engine()
    det = NullAnomalySource()
    for i in range(3):
        e.observe(raw(100, t=i, vm_id="a"), det)
    # another VM's counts do not make 300 a jump
    assert e.observe(raw(300, idle=70.0, vm_id="b"), det).reason is not FilterReason.USER_COUNT_JUMP
    assert e.observe(raw(300, idle=70.0, vm_id="a"), det).reason is FilterReason.USER_COUNT_JUMP


def test_selection_before_training():
    e = engine()
    with pytest.raises(RuntimeError):
        e.selection_input()
    res = e.select(fallback="m1.small")
    assert res.fallback and res.chosen_type == "m1.small"
    assert res.to_record()["fallback"] is True


def test_selection_after_training():
    e = engine()
    det = NullAnomalySource()
    for i in range(30):
        e.observe(raw(100 + i, t=5.0 * i), det)
    inp = e.selection_input(delta=5)
    # well predicted samples are skipped, so the range only covers trained ones
    assert (inp.min_users, inp.max_users) == (e.trainer.min_users, e.trainer.max_users)
    assert 100 == inp.min_users < inp.max_users <= 129
    assert inp.ann is not e.ann
    assert set(inp.capacities) == {t.name for t in TABLE1_CATALOG}
    res = e.select(fallback="m1.small")
    assert not res.fallback and res.chosen_type in inp.capacities


def test_ram_capacity():
    assert engine().ram_capacity("m1.small") == pytest.approx(1.7 / 3.75)
