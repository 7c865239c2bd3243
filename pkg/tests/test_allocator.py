import random

import pytest

from hydrasim.allocator import (
    InsufficientCapacity,
    PlacementImpossible,
    allocate,
    allocate_choice,
    enumerate_choices,
    fetch_deadline,
    pick_gpu,
    sharing_score,
)
from hydrasim.cluster import (
    ClusterSnapshot,
    DeploymentPlan,
    MemoryPolicy,
    ModelProfile,
    PlanEntry,
    ServerSpec,
    SloSpec,
    StageTimings,
)

from oracles import brute_force_allocation, random_cluster, random_request

INF_SLO = SloSpec(1e9, 1e9)
TIM = StageTimings(4, 2, 6, 12, 0.01)
L7B = ModelProfile("l7b", 100.0, 0.5, 0.05)
L13B = ModelProfile("l13b", 193.6, 0.8, 0.06)


def idle(n=4, mem=24.0, gpus=1, nic=16.0):
    return ClusterSnapshot.empty([ServerSpec(f"s{i}", nic, 128, gpus, mem) for i in range(n)])


def test_infinite_slos_list_every_shape():
    choices = enumerate_choices(L7B, INF_SLO, TIM, idle())
    assert sorted((c.s, c.w) for c in choices) == [(s, w) for s in range(1, 5) for w in range(s + 1)]


def test_ttft_slo_below_startup_floor_is_infeasible():
    slo = SloSpec(TIM.container_create_s + TIM.cuda_init_s - 0.1, 1e9)
    assert enumerate_choices(L7B, slo, TIM, idle()) == []


def test_large_model_on_small_gpus_only_low_memory_pipelines():
    # 24.2 GB of weights plus headroom exceeds a 24 GB accelerator
    choices = enumerate_choices(L13B, INF_SLO, TIM, idle(mem=24.0))
    shapes = {(c.s, c.w) for c in choices}
    assert shapes == {(2, 0), (3, 0), (4, 0)}


def test_sharing_score_examples():
    snap = ClusterSnapshot.empty([ServerSpec("a", 16, 128, 2, 48)])
    two = DeploymentPlan(2, 0, (PlanEntry("a", 0, 1.0), PlanEntry("a", 1, 1.0)))
    assert sharing_score(two, snap) == 0
    snap.reserve(("a", 0), "x", "m", 1.0)
    snap.reserve(("a", 0), "y", "m", 1.0)
    one = DeploymentPlan(1, 1, (PlanEntry("a", 0, 1.0),))
    assert sharing_score(one, snap) == 2
    colocated = DeploymentPlan(2, 0, (PlanEntry("a", 1, 1.0), PlanEntry("a", 1, 1.0)))
    assert sharing_score(colocated, snap) == 1


def test_idle_cluster_gets_zero_sharing():
    plan = allocate(L7B, INF_SLO, TIM, idle())
    assert sharing_score(plan, idle()) == 0
    assert (plan.pipeline_size, plan.full_mem_workers) == (1, 1)


def test_fallback_when_nothing_meets_slo():
    snap = idle()
    choice = allocate_choice(L7B, SloSpec(0.1, 0.001), TIM, snap)
    assert choice.fallback
    assert choice.plan.to_dict()["servers"][0]["server_id"] == "s0"
    assert (choice.s, choice.w) == (1, 1)


def test_fallback_uses_best_ranked_server():
    snap = ClusterSnapshot.empty([ServerSpec("slow", 8, 64), ServerSpec("fast", 40, 256)])
    plan = allocate(L7B, SloSpec(0.1, 0.001), TIM, snap)
    assert plan.server_ids == ("fast",)


def test_placement_impossible():
    with pytest.raises(PlacementImpossible):
        allocate(L13B, INF_SLO, TIM, idle(mem=16.0))


def test_insufficient_capacity_is_retryable():
    snap = idle(n=1, mem=24.0)
    snap.reserve(("s0", 0), "x", "other", 20.0)
    with pytest.raises(InsufficientCapacity):
        allocate(L7B, SloSpec(0.1, 0.001), TIM, snap)


def test_prefers_more_stages_over_colocation():
    # fast servers with small idle GPUs fit only a quarter shard (3.5 GB);
    # the large GPUs that fit a half shard each already host a neighbour
    small = [ServerSpec(f"fast{i}", 40, 256, 1, 4.5) for i in range(4)]
    big = [ServerSpec(f"slow{i}", 8, 64, 1, 24) for i in range(2)]
    snap = ClusterSnapshot.empty(small + big)
    snap.reserve(("slow0", 0), "x", "other", 2.0)
    snap.reserve(("slow1", 0), "y", "other", 2.0)
    two = allocate_choice(L7B, INF_SLO, TIM, snap, sizes=(2,))
    assert sharing_score(two.plan, snap) == 2
    choice = allocate_choice(L7B, INF_SLO, TIM, snap)
    assert (choice.s, choice.w) == (4, 0)
    assert sharing_score(choice.plan, snap) == 0
    assert min(b[0] for b in brute_force_allocation(L7B, INF_SLO, TIM, snap, MemoryPolicy())) == 0


def test_pick_gpu_least_shared_then_lowest_index():
    snap = ClusterSnapshot.empty([ServerSpec("a", 16, 128, 3, 24)])
    snap.reserve(("a", 0), "x", "m", 1.0)
    assert pick_gpu(snap, "a", 1.0) == 1
    snap.reserve(("a", 1), "y", "m", 1.0)
    assert pick_gpu(snap, "a", 1.0) == 2


def test_min_full_workers_preference():
    choice = allocate_choice(L7B, INF_SLO, TIM, idle(), min_full_workers=3)
    assert choice.w >= min(3, choice.s)


def test_fetch_deadline():
    slo = SloSpec(10.0, 1.0)
    # prefill term for s=4, w=0: 0.5 * 4 + 0.04
    assert fetch_deadline(L7B, TIM, slo, 4, 0, 100.0) == pytest.approx(100 + 10 - 2.04)


def test_admission_rejection_substitutes_next_server():
    snap = ClusterSnapshot.empty([ServerSpec("a", 40, 256), ServerSpec("b", 16, 128),
                                  ServerSpec("c", 8, 64)])
    refused = {"a"}
    choice = allocate_choice(L7B, INF_SLO, TIM, snap, sizes=(1,),
                             admit=lambda sid, gbit, d: sid not in refused)
    assert choice.plan.server_ids == ("b",)


def test_admission_everywhere_rejected_raises():
    with pytest.raises(InsufficientCapacity):
        allocate_choice(L7B, INF_SLO, TIM, idle(), admit=lambda *a: False)


def test_determinism():
    rng = random.Random(5)
    snap = random_cluster(rng)
    prof, tim = random_request(rng)
    a = allocate_choice(prof, SloSpec(15, 0.2), tim, snap)
    b = allocate_choice(prof, SloSpec(15, 0.2), tim, snap.copy())
    assert a == b


@pytest.mark.parametrize("seed", range(40))
def test_matches_brute_force_oracle(seed):
    rng = random.Random(1000 + seed)
    snap = random_cluster(rng)
    prof, tim = random_request(rng)
    slo = SloSpec(rng.uniform(5, 30), rng.uniform(0.05, 0.4))
    mem = MemoryPolicy()
    if not any(s.gpu_mem_gb >= mem.full_reservation(prof) for s in snap.servers):
        with pytest.raises(PlacementImpossible):
            allocate_choice(prof, slo, tim, snap, mem=mem)
        return
    feasible = brute_force_allocation(prof, slo, tim, snap, mem)
    try:
        choice = allocate_choice(prof, slo, tim, snap, mem=mem)
    except InsufficientCapacity:
        assert not feasible
        return
    if not feasible:
        assert choice.fallback and (choice.s, choice.w) == (1, 1)
        return
    best = min((score, s, -w) for score, s, w, _, _ in feasible)
    assert (sharing_score(choice.plan, snap), choice.s, -choice.w) == best
    assert choice.ttft_pred <= slo.ttft_slo_s and choice.tpot_pred <= slo.tpot_slo_s
