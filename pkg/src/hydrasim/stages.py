"""Per-worker cold-start stage graphs.

Two workflows are supported:

* ``sequential``: container creation, library loading, CUDA init, fetch, load,
  one after another. The three startup stages are stretched to sum to
  ``runtime_total_s`` so the chain matches the sequential TTFT estimate.
* ``overlapped``: the shard fetch starts immediately, CUDA init runs right
  after container creation, then weight loading and library loading proceed
  in parallel. Loading streams behind the fetch, so it cannot end before the
  fetch does.

Workers that will later hold the whole model also get a second fetch/load
pair for the remaining layers. The second fetch starts when the first one
ends and is a background flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from hydrasim.cluster import DeploymentPlan, ModelProfile, ServerSpec, StageTimings
from hydrasim.predictor import predict_tpot, prefill_term

SEQUENTIAL = "sequential"
OVERLAPPED = "overlapped"
MODES = (SEQUENTIAL, OVERLAPPED)


class StageKind(Enum):
    CONTAINER_CREATE = "container_create"
    CUDA_INIT = "cuda_init"
    LIBRARY_LOAD = "library_load"
    FETCH = "fetch"
    LOAD = "load"
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class Stage:
    name: str
    kind: StageKind
    duration_s: float | None = None  # None: resolved by the NIC model
    size_gbit: float = 0.0
    after: tuple[str, ...] = ()  # may start once these end
    finish_after: tuple[str, ...] = ()  # may not end before these end
    part: int = 1

    @property
    def background(self) -> bool:
        return self.part == 2


@dataclass(frozen=True)
class StagePlan:
    worker_index: int
    mode: str
    stages: tuple[Stage, ...]

    def __post_init__(self):
        names = [st.name for st in self.stages]
        if len(set(names)) != len(names):
            raise ValueError("duplicate stage names")
        self.topo_order()  # raises on cycles

    def __getitem__(self, name: str) -> Stage:
        for st in self.stages:
            if st.name == name:
                return st
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(st.name == name for st in self.stages)

    @property
    def ready_deps(self) -> tuple[str, ...]:
        """Stages that must end before this worker can take part in prefill."""
        return self["prefill"].after

    @property
    def startup_stages(self) -> tuple[Stage, ...]:
        return tuple(st for st in self.stages
                     if st.kind not in (StageKind.PREFILL, StageKind.DECODE))

    def topo_order(self) -> list[str]:
        deps = {st.name: set(st.after) | set(st.finish_after) for st in self.stages}
        for name, ds in deps.items():
            missing = ds - deps.keys()
            if missing:
                raise ValueError(f"{name} depends on unknown stages {sorted(missing)}")
        order, done = [], set()
        while len(order) < len(deps):
            ready = [n for n in deps if n not in done and deps[n] <= done]
            if not ready:
                raise ValueError("stage graph has a cycle")
            for n in sorted(ready):
                order.append(n)
                done.add(n)
        return order


def build_stage_plan(
    profile: ModelProfile,
    timings: StageTimings,
    plan: DeploymentPlan,
    worker_index: int,
    mode: str,
    server: ServerSpec,
    *,
    consolidate: bool = False,
) -> StagePlan:
    """Stage graph for one worker of ``plan`` running on ``server``.

    With ``consolidate`` the worker also fetches and loads the layers of
    its peers (``fetch2``/``load2``), which never gate its first token.
    """
    s = plan.pipeline_size
    if not 0 <= worker_index < s:
        raise ValueError(f"worker_index {worker_index} outside pipeline of size {s}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    shard = profile.size_gbit / s
    rest = profile.size_gbit - shard
    p = server.pcie_gbps
    t = timings
    K = StageKind

    if mode == SEQUENTIAL:
        # stretch init stages so the three sum to runtime_total_s
        init = t.runtime_total_s - t.container_create_s
        parts = t.library_load_s + t.cuda_init_s
        lib = init * t.library_load_s / parts if parts > 0 else init
        cuda = init - lib
        stages = [
            Stage("container", K.CONTAINER_CREATE, t.container_create_s),
            Stage("library", K.LIBRARY_LOAD, lib, after=("container",)),
            Stage("cuda", K.CUDA_INIT, cuda, after=("library",)),
            Stage("fetch1", K.FETCH, None, shard, after=("cuda",)),
            Stage("load1", K.LOAD, shard / p, shard, after=("fetch1",)),
        ]
        ready = ("load1",)
        bg_fetch_after = ("load1",)
    else:
        stages = [
            Stage("fetch1", K.FETCH, None, shard),
            Stage("container", K.CONTAINER_CREATE, t.container_create_s),
            Stage("cuda", K.CUDA_INIT, t.cuda_init_s, after=("container",)),
            Stage("library", K.LIBRARY_LOAD, t.library_load_s, after=("cuda",)),
            Stage("load1", K.LOAD, shard / p, shard, after=("cuda",), finish_after=("fetch1",)),
        ]
        ready = ("load1", "library")
        bg_fetch_after = ("fetch1",)

    if consolidate and s > 1:
        stages += [
            Stage("fetch2", K.FETCH, None, rest, after=bg_fetch_after, part=2),
            Stage("load2", K.LOAD, rest / p, rest, after=("load1",),
                  finish_after=("fetch2",), part=2),
        ]
    stages += [
        Stage("prefill", K.PREFILL, prefill_term(profile, t, s, plan.full_mem_workers),
              after=ready),
        Stage("decode", K.DECODE, predict_tpot(profile, t, s, plan.full_mem_workers),
              after=("prefill",)),
    ]
    return StagePlan(worker_index, mode, tuple(stages))


def schedule(plan: StagePlan, fetch_gbps: float, start_s: float = 0.0) -> dict[str, tuple[float, float]]:
    """Uncontended start/end times, with every fetch running at ``fetch_gbps``.

    The second fetch follows the first on the same link, so two fetches of one
    worker never overlap.
    """
    times: dict[str, tuple[float, float]] = {}
    for name in plan.topo_order():
        st = plan[name]
        begin = max([start_s] + [times[d][1] for d in st.after])
        dur = st.size_gbit / fetch_gbps if st.kind is StageKind.FETCH else st.duration_s
        end = max([begin + dur] + [times[d][1] for d in st.finish_after])
        times[name] = (begin, end)
    return times
