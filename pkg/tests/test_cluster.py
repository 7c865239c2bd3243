import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrasim.cluster import (
    ClusterSnapshot,
    CorruptPlanError,
    DeploymentPlan,
    MemoryAccountingError,
    MemoryPolicy,
    ModelProfile,
    PlanEntry,
    ServerSpec,
    SloSpec,
    StageTimings,
    fits,
)


def snap_with(free_gb, mem=24.0, gpus=1):
    snap = ClusterSnapshot.empty([ServerSpec("a", 16, 128, gpus, mem)])
    for g in range(gpus):
        used = mem - free_gb
        if used > 0:
            snap.reserve(("a", g), f"x{g}", "m", used)
    return snap


def test_fits_exact():
    plan = DeploymentPlan(1, 1, (PlanEntry("a", 0, 24.0),))
    assert fits(plan, snap_with(24.0))


def test_fits_too_small():
    plan = DeploymentPlan(1, 1, (PlanEntry("a", 0, 24.0),))
    assert not fits(plan, snap_with(12.0))


def test_fits_is_cumulative_per_gpu():
    # 12 + 12 > 20 even though each entry fits alone
    plan = DeploymentPlan(2, 0, (PlanEntry("a", 0, 12.0), PlanEntry("a", 0, 12.0)))
    assert not fits(plan, snap_with(20.0))


def test_fits_unknown_server():
    plan = DeploymentPlan(1, 1, (PlanEntry("nope", 0, 1.0),))
    with pytest.raises(CorruptPlanError):
        fits(plan, snap_with(24.0))


def test_fits_unknown_gpu():
    plan = DeploymentPlan(1, 1, (PlanEntry("a", 3, 1.0),))
    with pytest.raises(CorruptPlanError):
        fits(plan, snap_with(24.0))


@pytest.mark.parametrize("s,w,n", [(0, 0, 0), (5, 0, 5), (2, 3, 2), (2, 1, 1)])
def test_plan_rejects_bad_shapes(s, w, n):
    with pytest.raises(ValueError):
        DeploymentPlan(s, w, tuple(PlanEntry(f"s{i}", 0, 1.0) for i in range(n)))


def test_plan_round_trip():
    plan = DeploymentPlan(3, 1, (PlanEntry("a", 0, 27.0), PlanEntry("b", 2, 9.0),
                                 PlanEntry("c", 1, 9.0)))
    assert DeploymentPlan.from_dict(plan.to_dict()) == plan


def test_value_type_validation():
    with pytest.raises(ValueError):
        ModelProfile("m", 0, 1, 1)
    with pytest.raises(ValueError):
        ModelProfile("m", 1, 1, 1, kv_bytes_per_token=-1)
    with pytest.raises(ValueError):
        StageTimings(5, 0, 0, 4, 0)  # runtime total below container creation
    with pytest.raises(ValueError):
        ServerSpec("a", 0, 1)
    with pytest.raises(ValueError):
        SloSpec(0, 1)


def test_profile_size_in_gb_is_converted_once():
    p = ModelProfile.from_dict({"model_id": "m", "size_gb": 12.5, "prefill_time_s": 1,
                                "decode_time_s": 0.1})
    assert p.size_gbit == 100.0


def test_memory_policy_reservations():
    mem = MemoryPolicy()
    p = ModelProfile("m", 100.0, 1, 1)  # 12.5 GB of weights
    assert mem.full_reservation(p) == 14.0  # 13.75 rounded up to 0.5
    assert mem.low_reservation(p, 4) == 3.5  # 3.4375 rounded up
    assert mem.low_reservation(p, 1) == mem.full_reservation(p)


def test_memory_policy_exact_multiple_not_bumped():
    mem = MemoryPolicy(headroom=0.0)
    assert mem.full_reservation(ModelProfile("m", 8 * 3.0, 1, 1)) == 3.0


def test_reserve_release_resize_accounting():
    snap = ClusterSnapshot.empty([ServerSpec("a", 16, 128, 2, 24)])
    snap.reserve(("a", 0), "w1", "m", 10.0)
    snap.reserve(("a", 0), "w2", "m", 4.0)
    assert snap.free_mem_gb[("a", 0)] == 10.0
    assert snap.n_resident(("a", 0)) == 2
    snap.resize(("a", 0), "w2", 14.0)
    assert snap.free_mem_gb[("a", 0)] == 0.0
    with pytest.raises(MemoryAccountingError):
        snap.reserve(("a", 0), "w3", "m", 0.5)
    assert snap.release(("a", 0), "w1") == 10.0
    snap.check_accounting()
    with pytest.raises(MemoryAccountingError):
        snap.release(("a", 0), "w1")


def test_running_reserved_counts_only_running():
    snap = ClusterSnapshot.empty([ServerSpec("a", 16, 128, 1, 24)])
    snap.reserve(("a", 0), "w1", "m", 10.0)
    snap.reserve(("a", 0), "w2", "m", 4.0)
    snap.set_running(("a", 0), "w2", True)
    assert snap.running_reserved_gb(("a", 0)) == 4.0


def test_copy_is_independent():
    snap = snap_with(24.0)
    c = snap.copy()
    c.reserve(("a", 0), "w", "m", 1.0)
    assert snap.free_mem_gb[("a", 0)] == 24.0


ops = st.lists(st.tuples(st.sampled_from(["reserve", "release", "resize"]),
                         st.integers(0, 5), st.integers(0, 1),
                         st.integers(1, 40).map(lambda k: k * 0.5)), max_size=60)


@settings(max_examples=200, deadline=None)
@given(ops)
def test_accounting_holds_under_any_operation_sequence(seq):
    snap = ClusterSnapshot.empty([ServerSpec("a", 16, 128, 2, 24)])
    where = {}
    for op, wid, gpu, gb in seq:
        wid = f"w{wid}"
        try:
            if op == "reserve" and wid not in where:
                snap.reserve(("a", gpu), wid, "m", gb)
                where[wid] = gpu
            elif op == "release" and wid in where:
                snap.release(("a", where.pop(wid)), wid)
            elif op == "resize" and wid in where:
                snap.resize(("a", where[wid]), wid, gb)
        except MemoryAccountingError:
            pass  # refused operations must leave state untouched
        snap.check_accounting()
