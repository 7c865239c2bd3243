"""Request streams: trace ingestion, Gamma arrivals, lengths and SLOs.

Arrivals are Gamma renewal processes parameterised by rate and coefficient
of variation: shape ``1/cv**2`` and scale ``cv**2/rate`` give gaps with mean
``1/rate`` and CV ``cv``.

Trace files are CSV with columns ``function_id,minute_index,count`` (the
per-minute invocation counts of the Azure Functions trace). Models are
mapped onto functions round-robin over the sorted model and function lists.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from hydrasim.cluster import ModelProfile, SloSpec

APPS = ("chatbot", "code", "summarization")

# 300 words per minute reading speed, rounded to a per-token budget
READING_SPEED_TPOT_S = 0.2
WARM_TTFT_MULTIPLIER = 5.0
WARM_TPOT_MULTIPLIER = 2.0
RELAXED_TTFT_APPS = ("summarization",)


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class RequestSpec:
    request_id: int
    model_id: str
    arrival_s: float
    input_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.output_tokens < 1:
            raise WorkloadError(f"request {self.request_id}: output_tokens must be >= 1")
        if self.input_tokens < 0 or self.arrival_s < 0:
            raise WorkloadError(f"request {self.request_id}: negative field")


@dataclass
class RequestRecord:
    """Outcome of one request. ``ttft_s`` is None for rejected requests."""

    request_id: int
    model_id: str
    arrival_s: float
    input_tokens: int
    output_tokens: int
    first_token_s: float | None = None
    completion_s: float | None = None
    cold_start: bool = False
    rejected: bool = False
    token_times: list[float] | None = field(default=None, repr=False)

    @property
    def ttft_s(self) -> float | None:
        if self.first_token_s is None:
            return None
        return self.first_token_s - self.arrival_s

    @property
    def tpot_s(self) -> float | None:
        if self.output_tokens < 2 or self.completion_s is None or self.first_token_s is None:
            return None
        return (self.completion_s - self.first_token_s) / (self.output_tokens - 1)

    @property
    def e2e_s(self) -> float | None:
        if self.completion_s is None:
            return None
        return self.completion_s - self.arrival_s


def sample_arrivals(rate_rps: float, cv: float, horizon_s: float, seed: int | None = 0,
                    start_s: float = 0.0) -> np.ndarray:
    """Arrival timestamps in ``[start_s, start_s + horizon_s)``."""
    if rate_rps <= 0 or cv <= 0:
        raise WorkloadError("rate and cv must be > 0")
    if horizon_s <= 0:
        return np.empty(0)
    rng = np.random.default_rng(seed)
    shape = 1.0 / cv**2
    scale = cv**2 / rate_rps
    chunk = max(16, int(rate_rps * horizon_s * 1.2) + 16)
    gaps = []
    total = 0.0
    while total < horizon_s:
        g = rng.gamma(shape, scale, size=chunk)
        gaps.append(g)
        total += float(g.sum())
    times = start_s + np.cumsum(np.concatenate(gaps))
    return times[times < start_s + horizon_s]


def derive_slos(warm_ttft_s: float, warm_tpot_s: float, app_kind: str) -> SloSpec:
    """SLOs from warm-request latencies.

    TTFT gets 5x the warm TTFT (10x for summarization); TPOT gets 2x the warm
    TPOT, except chatbots, which only need to keep up with a human reader.
    """
    if warm_ttft_s <= 0 or warm_tpot_s <= 0:
        raise WorkloadError("warm latencies must be > 0")
    if app_kind not in APPS:
        raise WorkloadError(f"unknown application {app_kind!r}")
    ttft = WARM_TTFT_MULTIPLIER * warm_ttft_s
    if app_kind in RELAXED_TTFT_APPS:
        ttft *= 2
    if app_kind == "chatbot":
        tpot = READING_SPEED_TPOT_S
    else:
        tpot = WARM_TPOT_MULTIPLIER * warm_tpot_s
    return SloSpec(ttft, tpot)


@dataclass
class TraceSeries:
    counts: dict[str, np.ndarray]  # function_id -> per-minute invocations

    def __post_init__(self):
        for fid, c in self.counts.items():
            if np.any(np.asarray(c) < 0):
                raise WorkloadError(f"negative count for function {fid}")

    @property
    def functions(self) -> list[str]:
        return sorted(self.counts)

    def total(self, function_id: str) -> float:
        return float(np.sum(self.counts[function_id]))

    @classmethod
    def from_csv(cls, path: str | Path) -> "TraceSeries":
        rows: dict[str, dict[int, int]] = {}
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            missing = {"function_id", "minute_index", "count"} - set(reader.fieldnames or ())
            if missing:
                raise WorkloadError(f"{path}: missing trace columns {sorted(missing)}")
            for row in reader:
                minute = int(row["minute_index"])
                rows.setdefault(row["function_id"], {})
                rows[row["function_id"]][minute] = (
                    rows[row["function_id"]].get(minute, 0) + int(row["count"]))
        counts = {}
        for fid, by_min in rows.items():
            arr = np.zeros(max(by_min) + 1)
            for m, c in by_min.items():
                arr[m] = c
            counts[fid] = arr
        return cls(counts)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["function_id", "minute_index", "count"])
            for fid in self.functions:
                for m, c in enumerate(self.counts[fid]):
                    if c:
                        w.writerow([fid, m, int(c)])


def map_models_round_robin(models: Iterable[str], functions: Iterable[str]) -> dict[str, str]:
    models, functions = sorted(models), sorted(functions)
    if not functions:
        raise WorkloadError("trace has no functions")
    return {m: functions[i % len(functions)] for i, m in enumerate(models)}


def per_model_rates(models: Sequence[str], rps: float, trace: TraceSeries | None = None,
                    mode: str = "even") -> dict[str, float]:
    """Split the aggregate rate across models.

    ``even`` gives every model ``rps / m``; ``trace`` weights each model by the
    total invocations of the function it is mapped to.
    """
    if not models:
        return {}
    if mode == "even" or trace is None:
        if mode not in ("even", "trace"):
            raise WorkloadError(f"unknown rate mode {mode!r}")
        return {m: rps / len(models) for m in models}
    if mode != "trace":
        raise WorkloadError(f"unknown rate mode {mode!r}")
    mapping = map_models_round_robin(models, trace.functions)
    weights = {m: trace.total(mapping[m]) for m in models}
    total = sum(weights.values())
    if total <= 0:
        raise WorkloadError("trace has no invocations")
    return {m: rps * weights[m] / total for m in sorted(models)}


def load_length_table(app_kind: str, path: str | Path | None = None) -> np.ndarray:
    """``(n, 2)`` int array of (input_tokens, output_tokens) rows."""
    if path is None:
        if app_kind not in APPS:
            raise WorkloadError(f"no bundled length table for {app_kind!r}")
        ref = resources.files("hydrasim") / "data" / f"lengths_{app_kind}.csv"
        text = ref.read_text()
    else:
        p = Path(path)
        if not p.exists():
            raise WorkloadError(f"length table {p} not found")
        text = p.read_text()
    rows = list(csv.DictReader(text.splitlines()))
    if not rows:
        raise WorkloadError(f"empty length table for {app_kind}")
    return np.array([[int(r["input_tokens"]), int(r["output_tokens"])] for r in rows])


def bundled_trace() -> TraceSeries:
    ref = resources.files("hydrasim") / "data" / "azure_trace_sample.csv"
    with resources.as_file(ref) as p:
        return TraceSeries.from_csv(p)


@dataclass(frozen=True)
class AppModel:
    """A base model as used by one application, with its warm latencies."""

    app: str
    profile: ModelProfile
    warm_ttft_s: float
    warm_tpot_s: float


def build_scenario(
    trace: TraceSeries | None,
    catalog: Sequence[AppModel],
    cv: float,
    rps: float,
    n_models_per_app: int,
    *,
    horizon_s: float,
    seed: int = 0,
    rate_mode: str = "even",
    length_tables: Mapping[str, str | Path] | None = None,
    base=None,
):
    """Expand the catalog into model instances and sample their requests.

    Every catalog entry is instantiated ``n_models_per_app`` times (model ids
    ``<app>-<base>-<i>``). ``base`` is an optional :class:`Scenario` whose
    cluster, timings and config are reused; the result is a new Scenario.
    """
    from hydrasim.scenario import ModelEntry, Scenario

    if not catalog:
        raise WorkloadError("empty catalog")
    apps = sorted({a.app for a in catalog})
    tables = {}
    for app in apps:
        path = (length_tables or {}).get(app)
        tables[app] = load_length_table(app, path)

    models: dict[str, ModelEntry] = {}
    for a in catalog:
        slo = derive_slos(a.warm_ttft_s, a.warm_tpot_s, a.app)
        for i in range(n_models_per_app):
            mid = f"{a.app}-{a.profile.model_id}-{i:02d}"
            prof = ModelProfile(mid, a.profile.size_gbit, a.profile.prefill_time_s,
                                a.profile.decode_time_s, a.profile.kv_bytes_per_token)
            models[mid] = ModelEntry(prof, slo, app=a.app)

    ids = sorted(models)
    rates = per_model_rates(ids, rps, trace, rate_mode)
    # the aggregate stream carries the burstiness; each arrival is then
    # assigned to a model in proportion to its rate
    arrival_ss, pick_ss, length_ss = np.random.SeedSequence(seed).spawn(3)
    times = sample_arrivals(rps, cv, horizon_s, seed=arrival_ss) if rps > 0 else np.empty(0)
    weights = np.array([rates[m] for m in ids]) / rps if rps > 0 else np.zeros(len(ids))
    picks = np.random.default_rng(pick_ss).choice(len(ids), size=len(times), p=weights)
    length_rng = np.random.default_rng(length_ss)
    requests = []
    for rid, (t, k) in enumerate(zip(times, picks)):
        mid = ids[k]
        table = tables[models[mid].app]
        inp, out = table[length_rng.integers(len(table))]
        requests.append(RequestSpec(rid, mid, float(t), int(inp), max(1, int(out))))

    if base is not None:
        return Scenario(servers=base.servers, models=models, timings=base.timings,
                        requests=requests, memory=base.memory, config=base.config)
    return Scenario(servers=(), models=models, timings=None, requests=requests)


def summarize_lengths(table: np.ndarray) -> dict[str, float]:
    return {
        "n": int(len(table)),
        "input_mean": float(table[:, 0].mean()),
        "output_mean": float(table[:, 1].mean()),
        "input_p50": float(np.median(table[:, 0])),
        "output_p50": float(np.median(table[:, 1])),
    }


def empirical_cv(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    m = x.mean()
    return float(x.std(ddof=1) / m) if m > 0 and len(x) > 1 else math.nan
