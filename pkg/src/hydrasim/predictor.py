"""Closed-form TTFT/TPOT prediction and bandwidth-ranked server selection.

All sizes are gigabits and all bandwidths gigabits per second, so
``size / bandwidth`` is seconds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from hydrasim.cluster import ModelProfile, StageTimings


@dataclass(frozen=True)
class PredictionInput:
    profile: ModelProfile
    timings: StageTimings
    s: int
    w: int
    chosen: tuple[tuple[float, float], ...]  # (nic_gbps, pcie_gbps) per stage

    def __post_init__(self):
        if self.s < 1 or not 0 <= self.w <= self.s:
            raise ValueError(f"invalid (s, w) = ({self.s}, {self.w})")
        if len(self.chosen) != self.s:
            raise ValueError(f"expected {self.s} servers, got {len(self.chosen)}")
        if any(b <= 0 or p <= 0 for b, p in self.chosen):
            raise ValueError("bandwidths must be > 0")


def pipeline_factor(s: int, w: int) -> float:
    """Number of single-worker compute units a size-``s`` pipeline spends per pass.

    A full-memory stage costs 1/s of a single worker, a low-memory stage a
    whole one (worst case, sharing its GPU proportionally to memory).
    """
    return s - w + w / s


def prefill_term(profile: ModelProfile, timings: StageTimings, s: int, w: int) -> float:
    return profile.prefill_time_s * pipeline_factor(s, w) + timings.net_hop_s * s


def predict_ttft_basic(inp: PredictionInput) -> float:
    """Sequential-workflow TTFT: runtime init, slowest shard fetch+load, prefill."""
    shard = inp.profile.size_gbit / inp.s
    worst = max(1.0 / b + 1.0 / p for b, p in inp.chosen)
    return (inp.timings.runtime_total_s + shard * worst
            + prefill_term(inp.profile, inp.timings, inp.s, inp.w))


def predict_ttft_overlapped(inp: PredictionInput) -> float:
    """TTFT when fetching starts at once and library loading overlaps weight loading."""
    t = inp.timings
    shard = inp.profile.size_gbit / inp.s
    ready = max(
        max(t.container_create_s + t.cuda_init_s + max(shard / p, t.library_load_s), shard / b)
        for b, p in inp.chosen
    )
    return ready + prefill_term(inp.profile, t, inp.s, inp.w)


def predict_tpot(profile: ModelProfile, timings: StageTimings, s: int, w: int) -> float:
    if s < 1 or not 0 <= w <= s:
        raise ValueError(f"invalid (s, w) = ({s}, {w})")
    return profile.decode_time_s * pipeline_factor(s, w) + timings.net_hop_s * s


def _ranked(candidates: Iterable[tuple[str, float]]) -> list[tuple[str, float]]:
    return sorted(candidates, key=lambda c: (c[1], c[0]))


def select_servers(
    full_capable: Sequence[tuple[str, float]],
    low_capable: Sequence[tuple[str, float]],
    s: int,
    w: int,
) -> tuple[str, ...] | None:
    """Pick ``s`` distinct servers, the first ``w`` for full-memory workers.

    Candidates are ``(server_id, 1/b + 1/p)`` pairs. The ``w`` best full-capable
    servers go first; the rest come from the merge of low-capable servers and
    the leftover full-capable ones. Ties break on server_id. Returns ``None``
    when there are not enough servers.
    """
    full = _ranked(dict(full_capable).items())
    if len(full) < w:
        return None
    head = [sid for sid, _ in full[:w]]
    taken = set(head)
    merged = dict(low_capable)
    merged.update(full[w:])
    rest = [sid for sid, _ in _ranked(merged.items()) if sid not in taken]
    if len(rest) < s - w:
        return None
    return tuple(head + rest[: s - w])
