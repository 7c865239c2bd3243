"""Discrete-event simulation of cold starts, pipelined serving and consolidation.

The engine pops ``(time, seq)``-ordered events from a heap. Same inputs give
the same event sequence: every tie is broken by insertion order and nothing
iterates over unordered containers.

Network: each server's NIC is a :class:`ContentionRegistry`. Flow completion
times are recomputed whenever a server's flow set changes, and the stale
completion event is invalidated with a per-server version number.

Compute: a pipeline token costs the sum of the per-stage times plus one
network hop per stage. A stage's time is its share of the single-GPU cost,
divided by its compute entitlement and stretched by how oversubscribed its
GPU is (see :func:`stage_compute_time`).
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

from hydrasim.allocator import (
    Choice,
    InsufficientCapacity,
    allocate_choice,
    fetch_deadline,
    pick_gpu,
    predict,
)
from hydrasim.autoscaler import ModelDemandState, desired_workers, plan_cold_start
from hydrasim.cluster import ClusterSnapshot, DeploymentPlan, PlanEntry
from hydrasim.contention import ContentionRegistry
from hydrasim.predictor import select_servers
from hydrasim.scenario import Scenario
from hydrasim.stages import StageKind, build_stage_plan
from hydrasim.workload import RequestRecord, RequestSpec

INF = float("inf")


class SimulationError(RuntimeError):
    pass


class Phase(Enum):
    STARTING = "Starting"
    PIPELINE_SERVING = "PipelineServing"
    BACKGROUND_LOADING = "BackgroundLoading"
    DRAINING = "Draining"
    STANDALONE = "Standalone"
    TERMINATED = "Terminated"


LEGAL_TRANSITIONS: dict[Phase, frozenset[Phase]] = {
    Phase.STARTING: frozenset({Phase.PIPELINE_SERVING, Phase.STANDALONE}),
    Phase.PIPELINE_SERVING: frozenset({Phase.BACKGROUND_LOADING, Phase.DRAINING,
                                       Phase.TERMINATED}),
    Phase.BACKGROUND_LOADING: frozenset({Phase.STANDALONE, Phase.TERMINATED}),
    Phase.DRAINING: frozenset({Phase.TERMINATED}),
    Phase.STANDALONE: frozenset({Phase.TERMINATED}),
    Phase.TERMINATED: frozenset(),
}


class EventKind(Enum):
    ARRIVAL = "Arrival"
    STAGE_COMPLETE = "StageComplete"
    FETCH_RATE_CHANGE = "FetchRateChange"
    TOKEN_EMITTED = "TokenEmitted"
    MIGRATION_DONE = "MigrationDone"
    KEEP_ALIVE_EXPIRE = "KeepAliveExpire"
    WINDOW_TICK = "WindowTick"


def stage_compute_time(unit_s: float, s: int, full_memory: bool,
                       active_gb: float, reference_gb: float) -> float:
    """Per-token time of one pipeline stage.

    ``unit_s`` is the single-GPU cost (prefill or decode). A stage does 1/s
    of the work. Full-memory workers (and standalone ones) are entitled to a
    whole GPU; a low-memory worker to 1/s of one. When the running workers on
    the GPU reserve more than one full model footprint, the stage is slowed
    in proportion.
    """
    entitlement = 1.0 if (full_memory or s == 1) else 1.0 / s
    sharing = max(1.0, active_gb / reference_gb) if reference_gb > 0 else 1.0
    return unit_s / s / entitlement * sharing


def decode_step_time(unit_s: float, net_hop_s: float,
                     stages: Iterable[tuple[bool, float, float]]) -> float:
    """Token latency of a pipeline: stage times plus one hop per stage.

    ``stages`` holds ``(full_memory, active_gb, reference_gb)`` per stage.
    With idle GPUs this equals ``unit_s * (s - w + w/s) + net_hop_s * s``.
    """
    stages = list(stages)
    s = len(stages)
    if s == 0:
        raise ValueError("pipeline has no stages")
    return sum(stage_compute_time(unit_s, s, f, a, r) for f, a, r in stages) + net_hop_s * s


def kv_migration_time(context_tokens: Iterable[int], kv_bytes_per_token: float, s: int,
                      rate_gbps: float, drain_s: float = 0.0) -> float:
    """Pause needed to hand a survivor the KV cache of its peers' layers.

    The survivor already holds 1/s of every request's KV cache and must
    receive the remaining ``(s-1)/s`` at ``rate_gbps``.
    """
    if s < 1 or rate_gbps <= 0:
        raise ValueError("need s >= 1 and a positive rate")
    gbit = sum(context_tokens) * kv_bytes_per_token * (s - 1) / s * 8 / 1e9
    return drain_s + gbit / rate_gbps


@dataclass(eq=False)
class _Request:
    spec: RequestSpec
    record: RequestRecord
    emitted: int = 0
    endpoint: "_Endpoint | None" = None


@dataclass(eq=False)
class _Worker:
    worker_id: str
    group: "_Group"
    index: int
    entry: PlanEntry
    full: bool
    stage_plan: Any
    phase: Phase = Phase.STARTING
    converter: bool = False
    started: dict = field(default_factory=dict)
    ended: dict = field(default_factory=dict)
    compute_done: set = field(default_factory=set)
    ready_at: float | None = None
    bg_done: bool = False
    running: bool = False

    @property
    def gpu(self):
        return self.entry.gpu

    @property
    def server_id(self) -> str:
        return self.entry.server_id


@dataclass(eq=False)
class _Group:
    group_id: str
    model_id: str
    choice: Choice
    k: int
    created_s: float
    deadline_s: float
    workers: list = field(default_factory=list)
    converters: list = field(default_factory=list)
    n_ready: int = 0
    ready_at: float | None = None
    endpoint: "_Endpoint | None" = None
    consolidated: bool = False
    dead: bool = False
    migration_start_s: float | None = None

    @property
    def equivalents(self) -> int:
        return max(1, len(self.converters))


@dataclass(eq=False)
class _Endpoint:
    endpoint_id: str
    order: int
    model_id: str
    group: _Group
    workers: list
    capacity: int
    ready_at: float
    standalone: bool
    running: list = field(default_factory=list)
    pending_prefill: list = field(default_factory=list)
    busy: bool = False
    migrating: bool = False
    migrate_pending: bool = False
    dead: bool = False
    ka_version: int = 0
    expired: bool = False

    @property
    def load(self) -> int:
        return len(self.running) + len(self.pending_prefill)

    @property
    def available(self) -> bool:
        return not (self.dead or self.migrating or self.migrate_pending)


@dataclass
class Reservation:
    worker_id: str
    model_id: str
    server_id: str
    gpu_index: int
    gb: float
    start_s: float
    end_s: float | None = None

    @property
    def gb_seconds(self) -> float:
        if self.end_s is None:
            raise ValueError(f"reservation of {self.worker_id} is still open")
        return self.gb * (self.end_s - self.start_s)


@dataclass
class MigrationRecord:
    group_id: str
    model_id: str
    start_s: float
    end_s: float
    survivors: int
    live_requests: int


@dataclass
class SimResult:
    records: list[RequestRecord]
    reservations: list[Reservation]
    utilization: list[dict]
    migrations: list[MigrationRecord]
    groups: list[dict]
    stages: list[dict]
    lifecycle: list[dict]
    events: list[tuple] | None
    contention: list[dict] | None
    end_time_s: float


class Simulator:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.sc = scenario
        self.cfg = scenario.config
        self.timings = scenario.timings
        self.mem = scenario.memory
        self.snap = ClusterSnapshot.empty(scenario.servers)
        self.regs = {s.server_id: ContentionRegistry(s.server_id, s.nic_gbps)
                     for s in scenario.servers}
        if self.cfg.background_shares_nic:
            self.bg_regs = self.regs
        else:
            self.bg_regs = {s.server_id: ContentionRegistry(s.server_id, s.nic_gbps)
                            for s in scenario.servers}
        self.reg_version: dict[tuple[str, bool], int] = {}
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._ids = itertools.count()
        self.mode = self.cfg.resolved_stage_mode

        self.queues = {m: deque() for m in scenario.models}
        self.demand = {m: ModelDemandState(self.cfg.window_len_s, self.cfg.ring_k)
                       for m in scenario.models}
        self.groups: list[_Group] = []
        self.endpoints: dict[str, list[_Endpoint]] = {m: [] for m in scenario.models}
        self.flows: dict[str, tuple[_Worker, str]] = {}
        self.deferred: set[str] = set()
        self.impossible: set[str] = set()
        for mid, entry in scenario.models.items():
            full = self.mem.full_reservation(entry.profile)
            if not any(s.gpu_mem_gb >= full for s in scenario.servers):
                self.impossible.add(mid)

        self.requests = [_Request(r, RequestRecord(r.request_id, r.model_id, r.arrival_s,
                                                   r.input_tokens, r.output_tokens))
                         for r in scenario.requests]
        if self.cfg.record_tokens:
            for r in self.requests:
                r.record.token_times = []
        self._arrivals_left = len(self.requests)

        self.reservations: list[Reservation] = []
        self._open_res: dict[str, Reservation] = {}
        self.utilization: list[dict] = []
        self.migrations: list[MigrationRecord] = []
        self.events: list[tuple] | None = [] if self.cfg.trace_events else None
        self.contention: list[dict] | None = [] if self.cfg.dump_contention else None
        self.stage_log: list[dict] = []
        self.lifecycle: list[dict] = []
        self.tick_index = 0

    # engine

    def _push(self, t: float, kind: EventKind, payload: Any) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), kind, payload))

    def run(self) -> SimResult:
        for r in self.requests:
            self._push(r.spec.arrival_s, EventKind.ARRIVAL, r)
        if self.requests:
            self._push(self.cfg.window_len_s, EventKind.WINDOW_TICK, None)
        handlers = {
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.STAGE_COMPLETE: self._on_stage_complete,
            EventKind.FETCH_RATE_CHANGE: self._on_fetch_rate_change,
            EventKind.TOKEN_EMITTED: self._on_token,
            EventKind.MIGRATION_DONE: self._on_migration_done,
            EventKind.KEEP_ALIVE_EXPIRE: self._on_keep_alive,
            EventKind.WINDOW_TICK: self._on_window_tick,
        }
        limit = self.cfg.max_time_s
        while self._heap:
            t, seq, kind, payload = heapq.heappop(self._heap)
            if limit is not None and t > limit:
                self.now = limit
                break
            if t < self.now - 1e-12:
                raise SimulationError(f"event at {t} scheduled in the past (now={self.now})")
            self.now = max(self.now, t)
            if self.events is not None:
                self.events.append((seq, t, kind.value, _describe(payload)))
            handlers[kind](payload)
            if self.cfg.check_invariants:
                self.check_invariants()
        return self._finish()

    def _finish(self) -> SimResult:
        for wid in sorted(self._open_res):
            self._open_res[wid].end_s = self.now
        self._open_res.clear()
        groups = [{
            "group_id": g.group_id, "model_id": g.model_id, "created_s": g.created_s,
            "ready_s": g.ready_at, "pipeline_size": g.choice.s, "full_mem_workers": g.choice.w,
            "survivors": len(g.converters), "fallback": g.choice.fallback,
            "servers": ",".join(g.choice.plan.server_ids),
        } for g in self.groups]
        return SimResult([r.record for r in self.requests], self.reservations, self.utilization,
                         self.migrations, groups, self.stage_log, self.lifecycle, self.events,
                         self.contention, self.now)

    def check_invariants(self) -> None:
        self.snap.check_accounting()
        for g in self.groups:
            ids = g.choice.plan.server_ids
            if len(set(ids)) != len(ids):
                raise SimulationError(f"{g.group_id} places two workers on one server")
            for w in g.workers:
                if w.phase is Phase.TERMINATED and w.worker_id in self._open_res:
                    raise SimulationError(f"terminated {w.worker_id} still holds memory")
        for reg in itertools.chain(self.regs.values(), self.bg_regs.values()):
            if any(r.pending_gbit < -1e-6 for r in reg.records.values()):
                raise SimulationError(f"negative pending fetch on {reg.server_id}")

    # phases and memory

    def _transition(self, w: _Worker, new: Phase) -> None:
        if new not in LEGAL_TRANSITIONS[w.phase]:
            raise SimulationError(f"{w.worker_id}: illegal transition {w.phase.value} -> {new.value}")
        w.phase = new

    def _util_row(self, gpu) -> None:
        srv = self.snap.server(gpu[0])
        self.utilization.append({
            "time_s": self.now, "server_id": gpu[0], "gpu_index": gpu[1],
            "reserved_gb": self.snap.reserved_gb(gpu), "capacity_gb": srv.gpu_mem_gb,
            "n_workers": self.snap.n_resident(gpu),
        })

    def _reserve(self, w: _Worker, gb: float) -> None:
        self.snap.reserve(w.gpu, w.worker_id, w.group.model_id, gb)
        res = Reservation(w.worker_id, w.group.model_id, w.server_id, w.gpu[1], gb, self.now)
        self.reservations.append(res)
        self._open_res[w.worker_id] = res
        self._util_row(w.gpu)

    def _resize(self, w: _Worker, gb: float) -> None:
        self.snap.resize(w.gpu, w.worker_id, gb)
        self._open_res[w.worker_id].end_s = self.now
        res = Reservation(w.worker_id, w.group.model_id, w.server_id, w.gpu[1], gb, self.now)
        self.reservations.append(res)
        self._open_res[w.worker_id] = res
        self._util_row(w.gpu)

    def _release(self, w: _Worker) -> None:
        self.snap.release(w.gpu, w.worker_id)
        self._open_res.pop(w.worker_id).end_s = self.now
        self._util_row(w.gpu)

    def _set_running(self, ep: _Endpoint, running: bool) -> None:
        for w in ep.workers:
            if w.running != running:
                w.running = running
                self.snap.set_running(w.gpu, w.worker_id, running)

    # network

    def _reg(self, server_id: str, background: bool) -> ContentionRegistry:
        return (self.bg_regs if background else self.regs)[server_id]

    def _touch(self, reg: ContentionRegistry) -> None:
        """Settle ``reg`` to now and finish any flows that completed."""
        for fid in reg.pop_finished(self.now):
            w, name = self.flows.pop(fid)
            self._end_stage(w, name)

    def _reschedule(self, reg: ContentionRegistry) -> None:
        key = (reg.server_id, reg is not self.regs[reg.server_id])
        v = self.reg_version.get(key, 0) + 1
        self.reg_version[key] = v
        if self.contention is not None:
            self.contention.extend(reg.rows(self.now))
        t = reg.next_completion_time()
        if t is not None:
            self._push(max(t, self.now), EventKind.FETCH_RATE_CHANGE, (reg, v))

    def _on_fetch_rate_change(self, payload) -> None:
        reg, version = payload
        key = (reg.server_id, reg is not self.regs[reg.server_id])
        if version != self.reg_version.get(key):
            return
        self._touch(reg)
        self._reschedule(reg)
        self._retry_deferred()

    def _admit_check(self, server_id: str, pending_gbit: float, deadline_s: float) -> bool:
        return self.regs[server_id].can_admit(pending_gbit, deadline_s, self.now)

    # allocation

    def _survivors(self, deficit: int, s: int) -> int:
        mode = self.cfg.consolidation
        if s == 1:
            return 1
        if mode == "none":
            return 0
        if mode == "scale_down":
            return 1
        if mode == "scale_up":
            return s
        return min(deficit, s)

    def _forced_choice(self, model_id: str) -> Choice:
        entry = self.sc.models[model_id]
        prof = entry.profile
        full_gb = self.mem.full_reservation(prof)
        for s in self.cfg.group_sizes:
            w = min(self.cfg.full_workers, s)
            low_gb = self.mem.low_reservation(prof, s)
            full_c = [(srv.server_id, srv.ratio) for srv in self.snap.servers
                      if any(self.snap.free_mem_gb[k] >= full_gb for k in self.snap.gpus(srv.server_id))]
            low_c = [(srv.server_id, srv.ratio) for srv in self.snap.servers
                     if any(self.snap.free_mem_gb[k] >= low_gb for k in self.snap.gpus(srv.server_id))]
            g = select_servers(full_c, low_c, s, w)
            if g is None:
                continue
            entries = tuple(PlanEntry(sid, pick_gpu(self.snap, sid, full_gb if i < w else low_gb),
                                      full_gb if i < w else low_gb) for i, sid in enumerate(g))
            plan = DeploymentPlan(s, w, entries)
            ttft, tpot = predict(prof, self.timings, self.snap, plan, not self.cfg.basic_predictor)
            return Choice(plan, ttft, tpot)
        raise InsufficientCapacity(f"forced plan does not fit for {model_id}")

    def _baseline_choice(self, model_id: str) -> Choice:
        prof = self.sc.models[model_id].profile
        full_gb = self.mem.full_reservation(prof)
        best = None
        for order, srv in enumerate(self.snap.servers):
            for key in self.snap.gpus(srv.server_id):
                if self.snap.free_mem_gb[key] >= full_gb:
                    rank = (self.snap.n_resident(key), order, key[1])
                    if best is None or rank < best[0]:
                        best = (rank, key)
        if best is None:
            raise InsufficientCapacity(f"no gpu has {full_gb} GB free for {model_id}")
        key = best[1]
        plan = DeploymentPlan(1, 1, (PlanEntry(key[0], key[1], full_gb),))
        ttft, tpot = predict(prof, self.timings, self.snap, plan,
                             overlapped=self.mode == "overlapped")
        return Choice(plan, ttft, tpot)

    def _choose(self, model_id: str, deficit: int) -> Choice:
        if self.cfg.policy != "hydraserve":
            return self._baseline_choice(model_id)
        if self.cfg.group_sizes and self.cfg.full_workers is not None:
            return self._forced_choice(model_id)
        entry = self.sc.models[model_id]
        mode = self.cfg.consolidation
        min_full = {"none": 0, "scale_down": 1, "scale_up": 4}.get(mode, deficit)
        return allocate_choice(
            entry.profile, entry.slo, self.timings, self.snap, mem=self.mem,
            overlapped=not self.cfg.basic_predictor,
            admit=self._admit_check if self.cfg.admission else None,
            now_s=self.now, sizes=self.cfg.group_sizes or range(1, 5),
            min_full_workers=min_full)

    def _autoscale(self, model_id: str) -> None:
        if model_id in self.impossible:
            return
        st = self.demand[model_id]
        st.waiting_queue_len = len(self.queues[model_id])
        st.live_workers = sum(1 for ep in self.endpoints[model_id] if ep.standalone)
        st.inflight_group_sizes = [g.equivalents for g in self.groups
                                   if g.model_id == model_id and not g.dead and not g.consolidated]

        def alloc(deficit: int) -> Choice:
            choice = self._choose(model_id, deficit)
            g = self._create_group(model_id, choice, self._survivors(deficit, choice.s))
            # register fetches now so the next group's admission sees them
            for w in g.workers:
                self._start_ready_stages(w)
            return choice

        plan_cold_start(st, alloc, self.cfg.batch_capacity, survivors=self._survivors)
        st.inflight_group_sizes = [g.equivalents for g in self.groups
                                   if g.model_id == model_id and not g.dead and not g.consolidated]
        gap = desired_workers(st, self.cfg.batch_capacity) - st.live_workers - st.inflight
        if gap > 0 and self.queues[model_id]:
            self.deferred.add(model_id)
        else:
            self.deferred.discard(model_id)

    def _retry_deferred(self) -> None:
        for mid in sorted(self.deferred):
            self._autoscale(mid)

    # groups and workers

    def _create_group(self, model_id: str, choice: Choice, k: int) -> _Group:
        entry = self.sc.models[model_id]
        prof = entry.profile
        plan = choice.plan
        gid = f"g{next(self._ids)}"
        s = plan.pipeline_size
        if choice.fallback or self.cfg.policy != "hydraserve":
            deadline = INF
        else:
            deadline = fetch_deadline(prof, self.timings, entry.slo, s, plan.full_mem_workers, self.now)
        g = _Group(gid, model_id, choice, k if s > 1 else 1, self.now, deadline)
        # converters: full-memory workers on the best-ranked servers first
        if s > 1 and k > 0:
            order = sorted(range(s), key=lambda i: (not plan.is_full(i),
                                                    self.snap.server(plan.servers[i].server_id).ratio, i))
            conv = set(order[:k])
        else:
            conv = set()
        for i, e in enumerate(plan.servers):
            sp = build_stage_plan(prof, self.timings, plan, i, self.mode,
                                  self.snap.server(e.server_id), consolidate=i in conv)
            w = _Worker(f"{gid}.w{i}", g, i, e, plan.is_full(i) or s == 1, sp, converter=i in conv)
            self._reserve(w, e.mem_reserved_gb)
            g.workers.append(w)
        g.converters = [w for w in g.workers if w.converter]
        self.groups.append(g)
        self._lifecycle("create", g.model_id, gid)
        return g

    def _lifecycle(self, kind: str, model_id: str, subject: str) -> None:
        self.lifecycle.append({"tick": self.tick_index, "time_s": self.now, "kind": kind,
                               "model_id": model_id, "subject": subject})

    def _start_ready_stages(self, w: _Worker) -> None:
        if w.phase is Phase.TERMINATED:
            return
        for st in w.stage_plan.startup_stages:
            if st.name in w.started:
                continue
            if all(d in w.ended for d in st.after):
                self._start_stage(w, st)

    def _start_stage(self, w: _Worker, st) -> None:
        if st.part == 2 and st.kind is StageKind.FETCH and not w.full:
            # a low-memory survivor must grow to a full reservation first
            full_gb = self.mem.full_reservation(self.sc.models[w.group.model_id].profile)
            cur = self._open_res[w.worker_id].gb
            if self.snap.free_mem_gb[w.gpu] >= full_gb - cur:
                self._resize(w, full_gb)
                w.full = True
            else:
                self._drop_converter(w)
                return
        w.started[st.name] = self.now
        if st.kind is StageKind.FETCH:
            reg = self._reg(w.server_id, st.background)
            self._touch(reg)
            fid = f"{w.worker_id}/{st.name}"
            deadline = INF if st.background else w.group.deadline_s
            self.flows[fid] = (w, st.name)
            reg.add(fid, st.size_gbit, deadline, self.now)
            self._reschedule(reg)
        else:
            self._push(self.now + st.duration_s, EventKind.STAGE_COMPLETE, (w, st.name))

    def _drop_converter(self, w: _Worker) -> None:
        w.converter = False
        for name in ("fetch2", "load2"):
            w.started.setdefault(name, self.now)
        g = w.group
        g.converters = [c for c in g.converters if c is not w]
        self._check_consolidation(g)

    def _on_stage_complete(self, payload) -> None:
        w, name = payload
        if w.phase is Phase.TERMINATED:
            return
        w.compute_done.add(name)
        self._maybe_end(w, name)

    def _maybe_end(self, w: _Worker, name: str) -> None:
        if name in w.ended or name not in w.compute_done:
            return
        if all(d in w.ended for d in w.stage_plan[name].finish_after):
            self._end_stage(w, name)

    def _end_stage(self, w: _Worker, name: str) -> None:
        if w.phase is Phase.TERMINATED:
            return
        w.ended[name] = self.now
        self.stage_log.append({"worker_id": w.worker_id, "group_id": w.group.group_id,
                               "stage": name, "start_s": w.started[name], "end_s": self.now})
        for st in w.stage_plan.startup_stages:
            if name in st.finish_after:
                self._maybe_end(w, st.name)
        self._start_ready_stages(w)
        if w.ready_at is None and all(d in w.ended for d in w.stage_plan.ready_deps):
            w.ready_at = self.now
            g = w.group
            g.n_ready += 1
            if g.n_ready == len(g.workers):
                self._on_group_ready(g)
        if name == "load2":
            w.bg_done = True
            self._check_consolidation(w.group)

    def _on_group_ready(self, g: _Group) -> None:
        g.ready_at = self.now
        s = g.choice.s
        cap = self.cfg.batch_capacity
        if s == 1:
            w = g.workers[0]
            self._transition(w, Phase.STANDALONE)
            g.consolidated = True
            self._new_endpoint(g, [w], cap, standalone=True)
            return
        for w in g.workers:
            self._transition(w, Phase.PIPELINE_SERVING)
        for w in g.converters:
            if not w.bg_done:
                self._transition(w, Phase.BACKGROUND_LOADING)
        ep = self._new_endpoint(g, list(g.workers), cap * g.equivalents, standalone=False,
                                kick=False)
        g.endpoint = ep
        self._check_consolidation(g)
        if not ep.dead:
            self._kick(ep)

    def _new_endpoint(self, g: _Group, workers: list, capacity: int, *, standalone: bool,
                      kick: bool = True) -> _Endpoint:
        n = next(self._ids)
        ep = _Endpoint(f"e{n}", n, g.model_id, g, workers, capacity, self.now, standalone)
        self.endpoints[g.model_id].append(ep)
        if kick:
            self._kick(ep)
        return ep

    # consolidation

    def _check_consolidation(self, g: _Group) -> None:
        if g.consolidated or g.dead or g.ready_at is None or g.endpoint is None:
            return
        if not g.converters or not all(w.bg_done for w in g.converters):
            return
        ep = g.endpoint
        if ep.migrating:
            return
        if ep.busy:
            ep.migrate_pending = True
            return
        self._start_migration(g)

    def _start_migration(self, g: _Group) -> None:
        ep = g.endpoint
        ep.migrating = True
        ep.migrate_pending = False
        g.migration_start_s = self.now
        self._set_running(ep, False)
        survivors = sorted(g.converters, key=lambda w: w.index)
        for w in survivors:
            if w.phase is Phase.PIPELINE_SERVING:
                self._transition(w, Phase.BACKGROUND_LOADING)
        live = list(ep.running)
        if not live:
            self._push(self.now, EventKind.MIGRATION_DONE, g)
            return
        for w in g.workers:
            if not w.converter and w.phase is Phase.PIPELINE_SERVING:
                self._transition(w, Phase.DRAINING)
        prof = self.sc.models[g.model_id].profile
        s = g.choice.s
        rate = min(self.regs[sid].bandwidth / (len(self.regs[sid].projected(self.now)) + 1)
                   for sid in g.choice.plan.server_ids)
        drain = self._token_time(ep, prof.decode_time_s)
        longest = 0.0
        for j, w in enumerate(survivors):
            ctx = [r.spec.input_tokens + r.emitted for r in live[j::len(survivors)]]
            longest = max(longest, kv_migration_time(ctx, prof.kv_bytes_per_token, s, rate))
        self._push(self.now + drain + longest, EventKind.MIGRATION_DONE, g)

    def _on_migration_done(self, g: _Group) -> None:
        ep = g.endpoint
        if g.dead or ep is None or ep.dead:
            return
        survivors = sorted(g.converters, key=lambda w: w.index)
        live = list(ep.running)
        waiting = list(ep.pending_prefill)
        ep.running.clear()
        ep.pending_prefill.clear()
        ep.dead = True
        self.endpoints[g.model_id].remove(ep)
        g.consolidated = True
        self.migrations.append(MigrationRecord(g.group_id, g.model_id, g.migration_start_s,
                                               self.now, len(survivors), len(live)))
        new_eps = []
        for w in survivors:
            self._transition(w, Phase.STANDALONE)
            new_eps.append(self._new_endpoint(g, [w], self.cfg.batch_capacity, standalone=True,
                                              kick=False))
        for j, r in enumerate(live):
            target = new_eps[j % len(new_eps)]
            r.endpoint = target
            target.running.append(r)
        for j, r in enumerate(waiting):
            target = new_eps[j % len(new_eps)]
            r.endpoint = target
            target.pending_prefill.append(r)
        for w in g.workers:
            if not w.converter:
                self._terminate_worker(w)
        for e in new_eps:
            self._kick(e)
        self._retry_deferred()

    # serving

    def _token_time(self, ep: _Endpoint, unit_s: float) -> float:
        prof = self.sc.models[ep.model_id].profile
        ref = self.mem.full_reservation(prof)
        s = len(ep.workers)
        stages = [(w.full or s == 1, self.snap.running_reserved_gb(w.gpu), ref) for w in ep.workers]
        return decode_step_time(unit_s, self.timings.net_hop_s, stages)

    def _pick_endpoint(self, model_id: str) -> _Endpoint | None:
        best = None
        for ep in self.endpoints[model_id]:
            if ep.available and ep.load < ep.capacity:
                key = (ep.load / ep.capacity, ep.order)
                if best is None or key < best[0]:
                    best = (key, ep)
        return best[1] if best else None

    def _admit(self, ep: _Endpoint, r: _Request) -> None:
        r.endpoint = ep
        r.record.cold_start = ep.ready_at > r.spec.arrival_s
        ep.pending_prefill.append(r)

    def _on_arrival(self, r: _Request) -> None:
        self._arrivals_left -= 1
        mid = r.spec.model_id
        self.demand[mid].record_arrival()
        if mid in self.impossible:
            r.record.rejected = True
            return
        ep = self._pick_endpoint(mid)
        if ep is not None:
            self._admit(ep, r)
            self._kick(ep)
        else:
            self.queues[mid].append(r)
        self._autoscale(mid)

    def _kick(self, ep: _Endpoint) -> None:
        if ep.dead or ep.busy or ep.migrating:
            return
        if ep.migrate_pending:
            self._start_migration(ep.group)
            return
        q = self.queues[ep.model_id]
        while q and ep.load < ep.capacity:
            self._admit(ep, q.popleft())
        prof = self.sc.models[ep.model_id].profile
        if ep.pending_prefill:
            batch, kind = list(ep.pending_prefill), "prefill"
            ep.pending_prefill.clear()
            unit = prof.prefill_time_s
        elif ep.running:
            batch, kind = list(ep.running), "decode"
            unit = prof.decode_time_s
        else:
            self._go_idle(ep)
            return
        self._set_running(ep, True)
        ep.busy = True
        ep.expired = False
        ep.ka_version += 1
        self._push(self.now + self._token_time(ep, unit), EventKind.TOKEN_EMITTED, (ep, kind, batch))

    def _go_idle(self, ep: _Endpoint) -> None:
        self._set_running(ep, False)
        ep.ka_version += 1
        self._push(self.now + self.cfg.keep_alive_s, EventKind.KEEP_ALIVE_EXPIRE, (ep, ep.ka_version))

    def _on_token(self, payload) -> None:
        ep, kind, batch = payload
        ep.busy = False
        for r in batch:
            r.emitted += 1
            rec = r.record
            if rec.token_times is not None:
                rec.token_times.append(self.now)
            if r.emitted == 1:
                rec.first_token_s = self.now
            if r.emitted >= r.spec.output_tokens:
                rec.completion_s = self.now
                if kind == "decode":
                    ep.running.remove(r)
                r.endpoint = None
            elif kind == "prefill":
                ep.running.append(r)
        if ep.dead:
            return
        self._kick(ep)

    # scale-in

    def _on_keep_alive(self, payload) -> None:
        ep, version = payload
        if ep.dead or version != ep.ka_version or ep.busy or ep.load or not ep.available:
            return
        # reaped at the next window tick if the model has a surplus then
        ep.expired = True

    def _reap(self, model_id: str) -> None:
        st = self.demand[model_id]
        st.waiting_queue_len = len(self.queues[model_id])
        desired = desired_workers(st, self.cfg.batch_capacity)
        for ep in list(self.endpoints[model_id]):
            if not ep.expired or ep.dead or ep.busy or ep.load or not ep.available:
                continue
            live = sum(1 for e in self.endpoints[model_id] if e.standalone)
            inflight = sum(g.equivalents for g in self.groups
                           if g.model_id == model_id and not g.dead and not g.consolidated)
            mine = 1 if ep.standalone else ep.group.equivalents
            if live + inflight - mine >= desired:
                self._terminate_endpoint(ep)

    def _terminate_endpoint(self, ep: _Endpoint) -> None:
        self._lifecycle("terminate", ep.model_id, ep.endpoint_id)
        ep.dead = True
        self.endpoints[ep.model_id].remove(ep)
        g = ep.group
        if not ep.standalone:
            g.dead = True
        for w in ep.workers:
            self._terminate_worker(w)
        if not ep.standalone:
            for w in g.workers:
                self._terminate_worker(w)

    def _terminate_worker(self, w: _Worker) -> None:
        if w.phase is Phase.TERMINATED:
            return
        self._transition(w, Phase.TERMINATED)
        for name, t in list(w.started.items()):
            fid = f"{w.worker_id}/{name}"
            if fid in self.flows:
                del self.flows[fid]
                reg = self._reg(w.server_id, w.stage_plan[name].background)
                self._touch(reg)
                reg.cancel(fid, self.now)
                self._reschedule(reg)
        if w.running:
            w.running = False
        self._release(w)

    def _on_window_tick(self, _) -> None:
        self.tick_index += 1
        for mid in self.sc.models:
            self.demand[mid].tick()
        # scale in before scaling out so freed memory is visible to new groups
        for mid in self.sc.models:
            self._reap(mid)
        for mid in self.sc.models:
            self._autoscale(mid)
        if self._active():
            self._push(self.now + self.cfg.window_len_s, EventKind.WINDOW_TICK, None)

    def _active(self) -> bool:
        if self._arrivals_left > 0:
            return True
        if any(self.queues.values()):
            return True
        return any(not g.dead and any(w.phase is not Phase.TERMINATED for w in g.workers)
                   for g in self.groups)


def _describe(payload: Any) -> str:
    if payload is None:
        return ""
    if isinstance(payload, _Request):
        return f"req{payload.spec.request_id}"
    if isinstance(payload, _Group):
        return payload.group_id
    if isinstance(payload, tuple):
        head = payload[0]
        if isinstance(head, _Worker):
            return f"{head.worker_id}:{payload[1]}"
        if isinstance(head, _Endpoint):
            return f"{head.endpoint_id}:{payload[1]}"
        if isinstance(head, ContentionRegistry):
            return f"{head.server_id}:v{payload[1]}"
    return repr(payload)


def simulate(scenario: Scenario) -> SimResult:
    return Simulator(scenario).run()
