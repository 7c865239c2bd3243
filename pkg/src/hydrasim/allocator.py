"""SLO-driven choice of pipeline size, full-memory worker count and servers.

For every pipeline size ``s`` in 1..4 and full-memory count ``w`` in 0..s the
allocator picks servers by bandwidth rank, predicts TTFT and TPOT, and keeps
the choices that meet both SLOs. The winner is the feasible choice that
shares GPUs least; ties go to smaller ``s``, then larger ``w``, then the
server list. With nothing feasible it falls back to one full-memory worker
on the best full-capable server.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable

from hydrasim.cluster import (
    ClusterSnapshot,
    DeploymentPlan,
    MemoryPolicy,
    ModelProfile,
    PlanEntry,
    SloSpec,
    StageTimings,
)
from hydrasim.predictor import (
    PredictionInput,
    predict_tpot,
    predict_ttft_basic,
    predict_ttft_overlapped,
    prefill_term,
    select_servers,
)

MAX_PIPELINE = 4

# admit(server_id, pending_gbit, deadline_s) -> accepted; must not mutate
AdmitFn = Callable[[str, float, float], bool]


class AllocationError(RuntimeError):
    pass


class PlacementImpossible(AllocationError):
    """No accelerator in the cluster can ever hold a full-memory worker."""


class InsufficientCapacity(AllocationError):
    """Nothing fits right now; the caller should queue and retry."""


@dataclass(frozen=True)
class Choice:
    plan: DeploymentPlan
    ttft_pred: float
    tpot_pred: float
    fallback: bool = False

    @property
    def s(self) -> int:
        return self.plan.pipeline_size

    @property
    def w(self) -> int:
        return self.plan.full_mem_workers


def candidate_servers(snap: ClusterSnapshot, need_gb: float) -> list[tuple[str, float]]:
    """Servers with at least one accelerator that has ``need_gb`` free."""
    out = []
    for srv in snap.servers:
        if any(snap.free_mem_gb[k] >= need_gb for k in snap.gpus(srv.server_id)):
            out.append((srv.server_id, srv.ratio))
    return out


def pick_gpu(snap: ClusterSnapshot, server_id: str, need_gb: float) -> int:
    """Least-shared accelerator on the server that fits, lowest index on ties."""
    fitting = [k for k in snap.gpus(server_id) if snap.free_mem_gb[k] >= need_gb]
    if not fitting:
        raise InsufficientCapacity(f"{server_id} has no gpu with {need_gb} GB free")
    return min(fitting, key=lambda k: (snap.n_resident(k), k[1]))[1]


def fetch_deadline(profile: ModelProfile, timings: StageTimings, slos: SloSpec,
                   s: int, w: int, now_s: float) -> float:
    """Latest time a shard fetch may finish and still leave room for prefill."""
    return now_s + slos.ttft_slo_s - prefill_term(profile, timings, s, w)


def predict(profile: ModelProfile, timings: StageTimings, snap: ClusterSnapshot,
            plan: DeploymentPlan, overlapped: bool = True) -> tuple[float, float]:
    s, w = plan.pipeline_size, plan.full_mem_workers
    chosen = tuple((snap.server(e.server_id).nic_gbps, snap.server(e.server_id).pcie_gbps)
                   for e in plan.servers)
    inp = PredictionInput(profile, timings, s, w, chosen)
    ttft = predict_ttft_overlapped(inp) if overlapped else predict_ttft_basic(inp)
    return ttft, predict_tpot(profile, timings, s, w)


def _build_plan(snap, s, w, server_ids, full_gb, low_gb) -> DeploymentPlan:
    entries = []
    for i, sid in enumerate(server_ids):
        need = full_gb if i < w else low_gb
        entries.append(PlanEntry(sid, pick_gpu(snap, sid, need), need))
    return DeploymentPlan(s, w, tuple(entries))


def enumerate_choices(
    profile: ModelProfile,
    slos: SloSpec,
    timings: StageTimings,
    snap: ClusterSnapshot,
    *,
    mem: MemoryPolicy = MemoryPolicy(),
    overlapped: bool = True,
    admit: AdmitFn | None = None,
    now_s: float = 0.0,
    sizes: Iterable[int] = range(1, MAX_PIPELINE + 1),
) -> list[Choice]:
    """All (s, w, servers) choices whose predictions meet both SLOs.

    When ``admit`` is given, each selected server is asked whether it can take
    the shard fetch; a rejecting server is skipped in favour of the next
    ranked candidate, and the choice is dropped if no substitute is left.
    """
    full_gb = mem.full_reservation(profile)
    full_cands = candidate_servers(snap, full_gb)
    choices = []
    for s in sizes:
        low_gb = mem.low_reservation(profile, s)
        low_cands = candidate_servers(snap, low_gb)
        shard = profile.size_gbit / s
        for w in range(s + 1):
            excluded: set[str] = set()
            while True:
                g = select_servers([c for c in full_cands if c[0] not in excluded],
                                   [c for c in low_cands if c[0] not in excluded], s, w)
                if g is None:
                    break
                plan = _build_plan(snap, s, w, g, full_gb, low_gb)
                ttft, tpot = predict(profile, timings, snap, plan, overlapped)
                # substitutes only rank worse, so a miss here is final
                if ttft > slos.ttft_slo_s or tpot > slos.tpot_slo_s:
                    break
                if admit is not None:
                    deadline = fetch_deadline(profile, timings, slos, s, w, now_s)
                    rejected = {sid for sid in g if not admit(sid, shard, deadline)}
                    if rejected:
                        excluded |= rejected
                        continue
                choices.append(Choice(plan, ttft, tpot))
                break
    return choices


def sharing_score(plan: DeploymentPlan, snap: ClusterSnapshot) -> int:
    """Resident workers each plan worker would join, plus co-placed plan pairs.

    Zero iff every worker of the plan lands alone on an idle accelerator.
    """
    score = sum(snap.n_resident(e.gpu) for e in plan.servers)
    per_gpu = Counter(e.gpu for e in plan.servers)
    score += sum(k * (k - 1) // 2 for k in per_gpu.values())
    return score


def _rank_key(choice: Choice, snap: ClusterSnapshot):
    plan = choice.plan
    return (sharing_score(plan, snap), plan.pipeline_size, -plan.full_mem_workers,
            tuple((e.server_id, e.gpu_index) for e in plan.servers))


def allocate_choice(
    profile: ModelProfile,
    slos: SloSpec,
    timings: StageTimings,
    snap: ClusterSnapshot,
    *,
    mem: MemoryPolicy = MemoryPolicy(),
    overlapped: bool = True,
    admit: AdmitFn | None = None,
    now_s: float = 0.0,
    sizes: Iterable[int] = range(1, MAX_PIPELINE + 1),
    min_full_workers: int = 0,
) -> Choice:
    """Like :func:`allocate` but also returns the predictions.

    ``min_full_workers`` restricts the pick to choices with at least that many
    full-memory workers whenever any exist (used when the workers are meant
    to turn into standalone endpoints later).
    """
    full_gb = mem.full_reservation(profile)
    if not any(srv.gpu_mem_gb >= full_gb for srv in snap.servers):
        raise PlacementImpossible(
            f"{profile.model_id} needs {full_gb} GB; no accelerator is that large")
    choices = enumerate_choices(profile, slos, timings, snap, mem=mem, overlapped=overlapped,
                                admit=admit, now_s=now_s, sizes=sizes)
    if min_full_workers:
        preferred = [c for c in choices if c.w >= min(min_full_workers, c.s)]
        if preferred:
            choices = preferred
    if choices:
        return min(choices, key=lambda c: _rank_key(c, snap))

    ranked = sorted(candidate_servers(snap, full_gb), key=lambda c: (c[1], c[0]))
    for sid, _ in ranked:
        # the fallback has no attainable deadline; it may only not hurt others
        if admit is None or admit(sid, profile.size_gbit, float("inf")):
            plan = _build_plan(snap, 1, 1, (sid,), full_gb, full_gb)
            ttft, tpot = predict(profile, timings, snap, plan, overlapped)
            return Choice(plan, ttft, tpot, fallback=True)
    if ranked:
        raise InsufficientCapacity(f"every server rejected a fetch of {profile.model_id}")
    raise InsufficientCapacity(f"no accelerator has {full_gb} GB free for {profile.model_id}")


def allocate(profile: ModelProfile, slos: SloSpec, timings: StageTimings,
             snap: ClusterSnapshot, **kwargs) -> DeploymentPlan:
    return allocate_choice(profile, slos, timings, snap, **kwargs).plan
