import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrasim.cluster import DeploymentPlan, ModelProfile, PlanEntry, ServerSpec, StageTimings
from hydrasim.predictor import PredictionInput, predict_ttft_basic, predict_ttft_overlapped
from hydrasim.stages import Stage, StageKind, StagePlan, build_stage_plan, schedule

PROF = ModelProfile("m", 100.0, 0.5, 0.05)
TIM = StageTimings(4, 2, 6, 12, 0.01)
SRV = ServerSpec("a", 16, 128)


def plan(s, w):
    return DeploymentPlan(s, w, tuple(PlanEntry(f"s{i}", 0, 1.0) for i in range(s)))


def first_token(sp, b=16.0):
    times = schedule(sp, b)
    return times["prefill"][1]


def test_sequential_single_worker_is_chain_sum():
    sp = build_stage_plan(PROF, TIM, plan(1, 1), 0, "sequential", SRV)
    assert first_token(sp) == pytest.approx(12 + 100 / 16 + 100 / 128 + 0.5 + 0.01, abs=1e-12)


def test_sequential_matches_basic_predictor():
    for s in range(1, 5):
        for w in range(s + 1):
            sp = build_stage_plan(PROF, TIM, plan(s, w), 0, "sequential", SRV)
            x = PredictionInput(PROF, TIM, s, w, ((16.0, 128.0),) * s)
            assert first_token(sp) == pytest.approx(predict_ttft_basic(x), abs=1e-9)


def test_overlapped_single_worker_matches_predictor():
    sp = build_stage_plan(PROF, TIM, plan(1, 1), 0, "overlapped", SRV)
    x = PredictionInput(PROF, TIM, 1, 1, ((16.0, 128.0),))
    assert first_token(sp) == pytest.approx(predict_ttft_overlapped(x), abs=1e-9)


def test_overlapped_fetch_starts_at_zero():
    sp = build_stage_plan(PROF, TIM, plan(4, 0), 2, "overlapped", SRV)
    assert sp["fetch1"].after == ()
    assert schedule(sp, 16.0)["fetch1"][0] == 0.0


def test_second_fetch_follows_first():
    sp = build_stage_plan(PROF, TIM, plan(4, 1), 0, "overlapped", SRV, consolidate=True)
    times = schedule(sp, 16.0)
    assert times["fetch2"][0] == pytest.approx(times["fetch1"][1])
    assert sp["fetch2"].size_gbit == pytest.approx(75.0)
    assert sp["fetch2"].background
    # the second part never delays the first token
    assert "fetch2" not in sp.ready_deps and "load2" not in sp.ready_deps


def test_no_second_part_for_single_worker():
    sp = build_stage_plan(PROF, TIM, plan(1, 1), 0, "overlapped", SRV, consolidate=True)
    assert "fetch2" not in sp


def test_load_streams_behind_fetch():
    # slow network: the load cannot finish before the fetch does
    sp = build_stage_plan(PROF, TIM, plan(1, 1), 0, "overlapped", SRV)
    times = schedule(sp, 1.0)
    assert times["load1"][1] == pytest.approx(100.0)


def test_bad_worker_index():
    with pytest.raises(ValueError):
        build_stage_plan(PROF, TIM, plan(2, 0), 2, "overlapped", SRV)
    with pytest.raises(ValueError):
        build_stage_plan(PROF, TIM, plan(2, 0), 0, "warp", SRV)


def test_cycle_rejected():
    with pytest.raises(ValueError):
        StagePlan(0, "overlapped", (Stage("a", StageKind.LOAD, 1, after=("b",)),
                                    Stage("b", StageKind.LOAD, 1, after=("a",))))


@settings(max_examples=200, deadline=None)
@given(s=st.integers(1, 4), data=st.data(), mode=st.sampled_from(["sequential", "overlapped"]),
       cons=st.booleans(), b=st.floats(0.5, 100))
def test_schedule_respects_dependencies(s, data, mode, cons, b):
    w = data.draw(st.integers(0, s))
    i = data.draw(st.integers(0, s - 1))
    sp = build_stage_plan(PROF, TIM, plan(s, w), i, mode, SRV, consolidate=cons)
    times = schedule(sp, b)
    assert set(times) == {st_.name for st_ in sp.stages}
    for st_ in sp.stages:
        begin, end = times[st_.name]
        assert end >= begin
        for d in st_.after:
            assert begin >= times[d][1] - 1e-12
        for d in st_.finish_after:
            assert end >= times[d][1] - 1e-12
