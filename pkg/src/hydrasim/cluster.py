"""Shared domain vocabulary: models, servers, deployment plans and GPU memory."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

GpuKey = tuple[str, int]


class CorruptPlanError(ValueError):
    """A plan references a server or accelerator the cluster does not have."""


class MemoryAccountingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelProfile:
    """Per-model size and measured single-worker timings.

    Sizes are in gigabits, times in seconds. ``kv_bytes_per_token`` is only
    used to size KV-cache migrations.
    """

    model_id: str
    size_gbit: float
    prefill_time_s: float
    decode_time_s: float
    kv_bytes_per_token: float = 0.0

    def __post_init__(self):
        if self.size_gbit <= 0:
            raise ValueError(f"{self.model_id}: size_gbit must be > 0")
        if self.prefill_time_s <= 0 or self.decode_time_s <= 0:
            raise ValueError(f"{self.model_id}: prefill/decode times must be > 0")
        if self.kv_bytes_per_token < 0:
            raise ValueError(f"{self.model_id}: kv_bytes_per_token must be >= 0")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelProfile":
        d = dict(d)
        # catalogs usually quote sizes in GB; convert once here
        if "size_gb" in d:
            d["size_gbit"] = float(d.pop("size_gb")) * 8.0
        return cls(
            model_id=str(d["model_id"]),
            size_gbit=float(d["size_gbit"]),
            prefill_time_s=float(d["prefill_time_s"]),
            decode_time_s=float(d["decode_time_s"]),
            kv_bytes_per_token=float(d.get("kv_bytes_per_token", 0.0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "size_gbit": self.size_gbit,
            "prefill_time_s": self.prefill_time_s,
            "decode_time_s": self.decode_time_s,
            "kv_bytes_per_token": self.kv_bytes_per_token,
        }


@dataclass(frozen=True)
class StageTimings:
    """Cold-start stage costs in seconds.

    ``runtime_total_s`` is the combined container creation plus runtime
    initialization cost of the sequential workflow. It is stored next to the
    decomposed stages rather than derived from them, since the two are
    measured separately.
    """

    container_create_s: float
    cuda_init_s: float
    library_load_s: float
    runtime_total_s: float
    net_hop_s: float

    def __post_init__(self):
        for name in ("container_create_s", "cuda_init_s", "library_load_s",
                     "runtime_total_s", "net_hop_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.runtime_total_s < self.container_create_s:
            raise ValueError("runtime_total_s must be >= container_create_s")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StageTimings":
        cc = float(d["container_create_s"])
        cu = float(d["cuda_init_s"])
        lib = float(d["library_load_s"])
        total = float(d.get("runtime_total_s", cc + cu + lib))
        return cls(cc, cu, lib, total, float(d["net_hop_s"]))

    def to_dict(self) -> dict[str, float]:
        return {
            "container_create_s": self.container_create_s,
            "cuda_init_s": self.cuda_init_s,
            "library_load_s": self.library_load_s,
            "runtime_total_s": self.runtime_total_s,
            "net_hop_s": self.net_hop_s,
        }


@dataclass(frozen=True)
class ServerSpec:
    server_id: str
    nic_gbps: float
    pcie_gbps: float
    gpu_count: int = 1
    gpu_mem_gb: float = 24.0

    def __post_init__(self):
        if self.nic_gbps <= 0 or self.pcie_gbps <= 0:
            raise ValueError(f"{self.server_id}: bandwidths must be > 0")
        if self.gpu_count < 1:
            raise ValueError(f"{self.server_id}: gpu_count must be >= 1")
        if self.gpu_mem_gb <= 0:
            raise ValueError(f"{self.server_id}: gpu_mem_gb must be > 0")

    @property
    def ratio(self) -> float:
        """Per-gigabit fetch-plus-load cost, 1/b + 1/p."""
        return 1.0 / self.nic_gbps + 1.0 / self.pcie_gbps

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ServerSpec":
        return cls(
            server_id=str(d["server_id"]),
            nic_gbps=float(d["nic_gbps"]),
            pcie_gbps=float(d["pcie_gbps"]),
            gpu_count=int(d.get("gpu_count", 1)),
            gpu_mem_gb=float(d.get("gpu_mem_gb", 24.0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "server_id": self.server_id,
            "nic_gbps": self.nic_gbps,
            "pcie_gbps": self.pcie_gbps,
            "gpu_count": self.gpu_count,
            "gpu_mem_gb": self.gpu_mem_gb,
        }


@dataclass(frozen=True)
class SloSpec:
    ttft_slo_s: float
    tpot_slo_s: float

    def __post_init__(self):
        if not (self.ttft_slo_s > 0 and self.tpot_slo_s > 0):
            raise ValueError("SLOs must be > 0")


@dataclass(frozen=True)
class PlanEntry:
    server_id: str
    gpu_index: int
    mem_reserved_gb: float

    @property
    def gpu(self) -> GpuKey:
        return (self.server_id, self.gpu_index)


@dataclass(frozen=True)
class DeploymentPlan:
    """Pipeline size ``s``, full-memory worker count ``w`` and stage-ordered servers.

    The first ``w`` entries are full-memory workers.
    """

    pipeline_size: int
    full_mem_workers: int
    servers: tuple[PlanEntry, ...]

    def __post_init__(self):
        s, w = self.pipeline_size, self.full_mem_workers
        if not 1 <= s <= 4:
            raise ValueError(f"pipeline_size {s} outside [1, 4]")
        if not 0 <= w <= s:
            raise ValueError(f"full_mem_workers {w} outside [0, {s}]")
        if len(self.servers) != s:
            raise ValueError(f"plan has {len(self.servers)} entries for s={s}")

    @property
    def server_ids(self) -> tuple[str, ...]:
        return tuple(e.server_id for e in self.servers)

    def is_full(self, index: int) -> bool:
        return index < self.full_mem_workers

    def to_dict(self) -> dict[str, Any]:
        return {
            "pipeline_size": self.pipeline_size,
            "full_mem_workers": self.full_mem_workers,
            "servers": [
                {"server_id": e.server_id, "gpu_index": e.gpu_index,
                 "mem_reserved_gb": e.mem_reserved_gb}
                for e in self.servers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DeploymentPlan":
        return cls(
            pipeline_size=int(d["pipeline_size"]),
            full_mem_workers=int(d["full_mem_workers"]),
            servers=tuple(
                PlanEntry(str(e["server_id"]), int(e["gpu_index"]), float(e["mem_reserved_gb"]))
                for e in d["servers"]
            ),
        )


@dataclass(frozen=True)
class MemoryPolicy:
    """How much accelerator memory full- and low-memory workers reserve.

    A full-memory worker reserves the model weights (times ``weight_overhead``)
    plus ``headroom`` for activations and KV cache; a low-memory worker of a
    size-``s`` pipeline reserves 1/s of that. Reservations are rounded up to
    ``quantum_gb`` so accounting stays exact in binary floating point.
    """

    quantum_gb: float = 0.5
    headroom: float = 0.10
    weight_overhead: float = 1.0

    def round_up(self, gb: float) -> float:
        q = self.quantum_gb
        if q <= 0:
            return gb
        return math.ceil(round(gb / q, 9)) * q

    def model_mem_gb(self, profile: ModelProfile) -> float:
        return profile.size_gbit / 8.0 * self.weight_overhead

    def full_reservation(self, profile: ModelProfile) -> float:
        return self.round_up(self.model_mem_gb(profile) * (1.0 + self.headroom))

    def low_reservation(self, profile: ModelProfile, s: int) -> float:
        return self.round_up(self.model_mem_gb(profile) * (1.0 + self.headroom) / s)

    def reservation(self, profile: ModelProfile, s: int, full: bool) -> float:
        return self.full_reservation(profile) if full else self.low_reservation(profile, s)

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "MemoryPolicy":
        d = d or {}
        return cls(
            quantum_gb=float(d.get("quantum_gb", 0.5)),
            headroom=float(d.get("headroom", 0.10)),
            weight_overhead=float(d.get("weight_overhead", 1.0)),
        )

    def to_dict(self) -> dict[str, float]:
        return {"quantum_gb": self.quantum_gb, "headroom": self.headroom,
                "weight_overhead": self.weight_overhead}


@dataclass
class ActiveWorker:
    worker_id: str
    model_id: str
    mem_reserved_gb: float
    running: bool = False


@dataclass
class ClusterSnapshot:
    """Servers plus per-accelerator free memory and resident workers.

    Read-only for the allocator; the simulator is the only owner that calls
    the mutating methods.
    """

    servers: tuple[ServerSpec, ...]
    free_mem_gb: dict[GpuKey, float] = field(default_factory=dict)
    active_workers: dict[GpuKey, list[ActiveWorker]] = field(default_factory=dict)

    def __post_init__(self):
        self.servers = tuple(self.servers)
        self._by_id = {s.server_id: s for s in self.servers}
        if len(self._by_id) != len(self.servers):
            raise ValueError("duplicate server_id in cluster")
        for srv in self.servers:
            for g in range(srv.gpu_count):
                self.free_mem_gb.setdefault((srv.server_id, g), srv.gpu_mem_gb)
                self.active_workers.setdefault((srv.server_id, g), [])

    @classmethod
    def empty(cls, servers: Iterable[ServerSpec]) -> "ClusterSnapshot":
        return cls(tuple(servers))

    def copy(self) -> "ClusterSnapshot":
        return ClusterSnapshot(
            self.servers,
            dict(self.free_mem_gb),
            {k: [copy.copy(w) for w in v] for k, v in self.active_workers.items()},
        )

    def server(self, server_id: str) -> ServerSpec:
        try:
            return self._by_id[server_id]
        except KeyError:
            raise CorruptPlanError(f"unknown server_id {server_id!r}") from None

    def gpus(self, server_id: str) -> list[GpuKey]:
        srv = self.server(server_id)
        return [(srv.server_id, g) for g in range(srv.gpu_count)]

    def _gpu(self, key: GpuKey) -> GpuKey:
        srv = self.server(key[0])
        if not 0 <= key[1] < srv.gpu_count:
            raise CorruptPlanError(f"{key[0]} has no gpu {key[1]}")
        return key

    def n_resident(self, key: GpuKey) -> int:
        return len(self.active_workers[self._gpu(key)])

    def reserved_gb(self, key: GpuKey) -> float:
        return sum(w.mem_reserved_gb for w in self.active_workers[self._gpu(key)])

    def running_reserved_gb(self, key: GpuKey) -> float:
        return sum(w.mem_reserved_gb for w in self.active_workers[key] if w.running)

    def reserve(self, key: GpuKey, worker_id: str, model_id: str, gb: float) -> None:
        key = self._gpu(key)
        if self.free_mem_gb[key] < gb:
            raise MemoryAccountingError(
                f"reserve {gb} GB on {key} with only {self.free_mem_gb[key]} GB free")
        self.free_mem_gb[key] -= gb
        self.active_workers[key].append(ActiveWorker(worker_id, model_id, gb))

    def release(self, key: GpuKey, worker_id: str) -> float:
        key = self._gpu(key)
        workers = self.active_workers[key]
        for i, w in enumerate(workers):
            if w.worker_id == worker_id:
                del workers[i]
                self.free_mem_gb[key] += w.mem_reserved_gb
                return w.mem_reserved_gb
        raise MemoryAccountingError(f"worker {worker_id} not resident on {key}")

    def resize(self, key: GpuKey, worker_id: str, new_gb: float) -> None:
        key = self._gpu(key)
        for w in self.active_workers[key]:
            if w.worker_id == worker_id:
                delta = new_gb - w.mem_reserved_gb
                if delta > self.free_mem_gb[key]:
                    raise MemoryAccountingError(f"cannot grow {worker_id} by {delta} GB on {key}")
                self.free_mem_gb[key] -= delta
                w.mem_reserved_gb = new_gb
                return
        raise MemoryAccountingError(f"worker {worker_id} not resident on {key}")

    def set_running(self, key: GpuKey, worker_id: str, running: bool) -> None:
        for w in self.active_workers[key]:
            if w.worker_id == worker_id:
                w.running = running
                return
        raise MemoryAccountingError(f"worker {worker_id} not resident on {key}")

    def check_accounting(self) -> None:
        """Raise if free + reserved differs from capacity on any accelerator."""
        for srv in self.servers:
            for g in range(srv.gpu_count):
                key = (srv.server_id, g)
                free = self.free_mem_gb[key]
                if free < 0:
                    raise MemoryAccountingError(f"negative free memory on {key}: {free}")
                total = free + sum(w.mem_reserved_gb for w in self.active_workers[key])
                if abs(total - srv.gpu_mem_gb) > 1e-9:
                    raise MemoryAccountingError(
                        f"{key}: free + reserved = {total} != capacity {srv.gpu_mem_gb}")


def fits(plan: DeploymentPlan, snap: ClusterSnapshot) -> bool:
    """True iff every accelerator in ``plan`` has room for its reservations.

    Entries landing on the same accelerator are summed.
    """
    demand: dict[GpuKey, float] = {}
    for e in plan.servers:
        key = snap._gpu(e.gpu)
        demand[key] = demand.get(key, 0.0) + e.mem_reserved_gb
    return all(snap.free_mem_gb[k] >= gb for k, gb in demand.items())
