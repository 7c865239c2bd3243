"""Simulation inputs: cluster, model catalog, request stream and knobs.

Scenarios round-trip through YAML. A server entry may carry ``count`` to
stamp out identical servers (ids get a ``-<i>`` suffix). A model entry
either gives its SLOs directly (``ttft_slo_s``/``tpot_slo_s``) or gives an
``app`` plus warm latencies (``warm_ttft_s``/``warm_tpot_s``) to derive them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from hydrasim.cluster import MemoryPolicy, ModelProfile, ServerSpec, SloSpec, StageTimings
from hydrasim.workload import APPS, RequestSpec, derive_slos

POLICIES = ("sequential-baseline", "overlapped-single", "hydraserve")
CONSOLIDATION = ("auto", "none", "scale_down", "scale_up")


class ScenarioError(ValueError):
    pass


@dataclass
class SimConfig:
    policy: str = "hydraserve"
    batch_capacity: int = 8
    keep_alive_s: float = 60.0
    window_len_s: float = 10.0
    ring_k: int = 3
    # auto: k = min(deficit, s); none: stay pipelined; scale_down: k = 1;
    # scale_up: k = s
    consolidation: str = "auto"
    # force the pipeline sizes the allocator may consider
    group_sizes: tuple[int, ...] | None = None
    # force this many full-memory workers per group (clamped to s)
    full_workers: int | None = None
    # stage workflow; defaults to sequential for the baseline, overlapped otherwise
    stage_mode: str | None = None
    basic_predictor: bool = False
    admission: bool = True
    background_shares_nic: bool = True
    max_time_s: float | None = None
    check_invariants: bool = False
    record_tokens: bool = False
    trace_events: bool = False
    dump_contention: bool = False

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ScenarioError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.consolidation not in CONSOLIDATION:
            raise ScenarioError(f"unknown consolidation {self.consolidation!r}")
        if self.batch_capacity < 1:
            raise ScenarioError("batch_capacity must be >= 1")
        if self.keep_alive_s < 0 or self.window_len_s <= 0 or self.ring_k < 1:
            raise ScenarioError("keep_alive_s >= 0, window_len_s > 0 and ring_k >= 1 required")
        if self.group_sizes is not None:
            self.group_sizes = tuple(int(s) for s in self.group_sizes)
            if not self.group_sizes or any(not 1 <= s <= 4 for s in self.group_sizes):
                raise ScenarioError("group_sizes must be a non-empty subset of 1..4")
        if self.full_workers is not None and self.full_workers < 0:
            raise ScenarioError("full_workers must be >= 0")
        if self.stage_mode not in (None, "sequential", "overlapped"):
            raise ScenarioError(f"unknown stage_mode {self.stage_mode!r}")

    @property
    def resolved_stage_mode(self) -> str:
        if self.stage_mode:
            return self.stage_mode
        return "sequential" if self.policy == "sequential-baseline" else "overlapped"

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "SimConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown config keys {sorted(unknown)}")
        if d.get("group_sizes") is not None:
            d["group_sizes"] = tuple(d["group_sizes"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if d["group_sizes"] is not None:
            d["group_sizes"] = list(d["group_sizes"])
        return d


@dataclass
class ModelEntry:
    profile: ModelProfile
    slo: SloSpec
    app: str | None = None


@dataclass
class Scenario:
    servers: tuple[ServerSpec, ...]
    models: dict[str, ModelEntry]
    timings: StageTimings | None
    requests: list[RequestSpec] = field(default_factory=list)
    memory: MemoryPolicy = field(default_factory=MemoryPolicy)
    config: SimConfig = field(default_factory=SimConfig)

    def validate(self) -> None:
        self.servers = tuple(self.servers)
        if not self.servers:
            raise ScenarioError("scenario has no servers")
        ids = [s.server_id for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate server ids")
        if self.timings is None:
            raise ScenarioError("scenario has no stage timings")
        for mid, entry in self.models.items():
            if entry.profile.model_id != mid:
                raise ScenarioError(f"model key {mid!r} != profile id {entry.profile.model_id!r}")
        seen = set()
        for r in self.requests:
            if r.model_id not in self.models:
                raise ScenarioError(f"request {r.request_id} targets unknown model {r.model_id!r}")
            if r.request_id in seen:
                raise ScenarioError(f"duplicate request id {r.request_id}")
            seen.add(r.request_id)
        self.requests = sorted(self.requests, key=lambda r: (r.arrival_s, r.request_id))
        self.config.validate()

    def with_config(self, **overrides) -> "Scenario":
        cfg = SimConfig(**{**asdict(self.config), **overrides})
        cfg.validate()
        return Scenario(self.servers, self.models, self.timings, list(self.requests),
                        self.memory, cfg)

    # serialization

    def to_dict(self) -> dict[str, Any]:
        models = []
        for entry in self.models.values():
            d = entry.profile.to_dict()
            d["ttft_slo_s"] = entry.slo.ttft_slo_s
            d["tpot_slo_s"] = entry.slo.tpot_slo_s
            if entry.app:
                d["app"] = entry.app
            models.append(d)
        return {
            "servers": [s.to_dict() for s in self.servers],
            "timings": self.timings.to_dict() if self.timings else None,
            "memory": self.memory.to_dict(),
            "models": models,
            "requests": [asdict(r) for r in self.requests],
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scenario":
        if not isinstance(d, dict):
            raise ScenarioError("scenario must be a mapping")
        try:
            servers = []
            for s in d.get("servers") or []:
                s = dict(s)
                count = int(s.pop("count", 1))
                if count == 1:
                    servers.append(ServerSpec.from_dict(s))
                else:
                    for i in range(count):
                        servers.append(ServerSpec.from_dict({**s, "server_id": f"{s['server_id']}-{i}"}))
            timings = StageTimings.from_dict(d["timings"]) if d.get("timings") else None
            models = {}
            for m in d.get("models") or []:
                entry = _model_entry(m)
                if entry.profile.model_id in models:
                    raise ScenarioError(f"duplicate model {entry.profile.model_id!r}")
                models[entry.profile.model_id] = entry
            requests = [
                RequestSpec(int(r.get("request_id", i)), str(r["model_id"]), float(r["arrival_s"]),
                            int(r.get("input_tokens", 0)), int(r.get("output_tokens", 1)))
                for i, r in enumerate(d.get("requests") or [])
            ]
        except (KeyError, TypeError) as e:
            raise ScenarioError(f"malformed scenario: {e!r}") from e
        sc = cls(tuple(servers), models, timings, requests,
                 MemoryPolicy.from_dict(d.get("memory")), SimConfig.from_dict(d.get("config")))
        sc.validate()
        return sc

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        p = Path(path)
        if not p.exists():
            raise ScenarioError(f"scenario file {p} not found")
        with open(p) as f:
            return cls.from_dict(yaml.safe_load(f))

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)


def _model_entry(m: dict[str, Any]) -> ModelEntry:
    m = dict(m)
    app = m.pop("app", None)
    if app is not None and app not in APPS:
        raise ScenarioError(f"unknown app {app!r}")
    ttft = m.pop("ttft_slo_s", None)
    tpot = m.pop("tpot_slo_s", None)
    warm_ttft = m.pop("warm_ttft_s", None)
    warm_tpot = m.pop("warm_tpot_s", None)
    profile = ModelProfile.from_dict(m)
    if ttft is not None and tpot is not None:
        slo = SloSpec(float(ttft), float(tpot))
    elif app is not None and warm_ttft is not None and warm_tpot is not None:
        slo = derive_slos(float(warm_ttft), float(warm_tpot), app)
    else:
        raise ScenarioError(
            f"model {profile.model_id}: give ttft_slo_s/tpot_slo_s or app with warm latencies")
    return ModelEntry(profile, slo, app)
