"""Per-server NIC bookkeeping for concurrent model fetches.

Flows on one server share its NIC bandwidth ``B`` equally. Each listed flow
carries its pending size and a fetch deadline; a new cold-start fetch is
admitted only if every flow (the newcomer included) can still finish by its
deadline at the reduced share ``B / (N + 1)``. Pending sizes are brought up
to date lazily, whenever membership changes, by subtracting ``B / N`` times
the elapsed time.

The simulator uses the same registry as its network model, so the estimate
and the simulated transfer never diverge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# Flows within this many gigabits of completion are treated as done; absorbs
# rounding when the simulator lands exactly on a predicted completion time.
FINISH_TOL_GBIT = 1e-9


@dataclass
class ContentionRecord:
    worker_id: str
    pending_gbit: float
    deadline_s: float
    demand_gbit: float
    delivered_gbit: float = 0.0

    @property
    def background(self) -> bool:
        return math.isinf(self.deadline_s)


class ContentionRegistry:
    def __init__(self, server_id: str, bandwidth_gbps: float, now_s: float = 0.0):
        if bandwidth_gbps <= 0:
            raise ValueError("bandwidth must be > 0")
        self.server_id = server_id
        self.bandwidth = float(bandwidth_gbps)
        self.records: dict[str, ContentionRecord] = {}
        self.last_change_s = float(now_s)
        # running totals used by conservation checks
        self.total_decrement_gbit = 0.0
        self.busy_time_s = 0.0
        self.delivered: dict[str, float] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, worker_id: str) -> bool:
        return worker_id in self.records

    @property
    def share_gbps(self) -> float:
        """Bandwidth each listed flow currently receives (B if idle)."""
        return self.bandwidth / max(1, len(self.records))

    def settle(self, now_s: float) -> list[str]:
        """Advance pending sizes to ``now_s``; drop and return flows that reached zero."""
        if now_s < self.last_change_s:
            raise ValueError(f"settle at {now_s} before last change {self.last_change_s}")
        n = len(self.records)
        elapsed = now_s - self.last_change_s
        self.last_change_s = now_s
        if n == 0 or elapsed == 0:
            return []
        dec = self.bandwidth / n * elapsed
        self.total_decrement_gbit += dec * n
        self.busy_time_s += elapsed
        done = []
        for rec in self.records.values():
            rec.delivered_gbit += min(dec, max(rec.pending_gbit, 0.0))
            rec.pending_gbit -= dec
            if rec.pending_gbit <= 0:
                done.append(rec.worker_id)
        for wid in done:
            self._finish(wid)
        return done

    def _finish(self, worker_id: str) -> None:
        rec = self.records.pop(worker_id)
        # residual below tolerance is delivered in full
        self.delivered[worker_id] = rec.demand_gbit

    def projected(self, now_s: float) -> list[tuple[float, float]]:
        """(pending, deadline) of each flow as of ``now_s``, without settling."""
        n = len(self.records)
        if n == 0:
            return []
        dec = self.bandwidth / n * max(0.0, now_s - self.last_change_s)
        return [(r.pending_gbit - dec, r.deadline_s) for r in self.records.values()
                if r.pending_gbit - dec > FINISH_TOL_GBIT]

    def can_admit(self, pending_gbit: float, deadline_s: float, now_s: float) -> bool:
        """Check the admission condition at ``now_s`` without mutating."""
        flows = self.projected(now_s)
        share = self.bandwidth / (len(flows) + 1)
        if pending_gbit > share * (deadline_s - now_s):
            return False
        return all(p <= share * (d - now_s) for p, d in flows)

    def admit(self, worker_id: str, pending_gbit: float, deadline_s: float,
              now_s: float) -> bool:
        """Append the fetch if all flows can still meet their deadlines."""
        self.settle(now_s)
        if not self.can_admit(pending_gbit, deadline_s, now_s):
            return False
        self.add(worker_id, pending_gbit, deadline_s, now_s)
        return True

    def add(self, worker_id: str, pending_gbit: float, deadline_s: float,
            now_s: float) -> None:
        """Append a flow unconditionally (baselines, background fetches)."""
        if worker_id in self.records:
            raise ValueError(f"{worker_id} already fetching on {self.server_id}")
        self.settle(now_s)
        if pending_gbit <= 0:
            self.delivered[worker_id] = 0.0
            return
        self.records[worker_id] = ContentionRecord(
            worker_id, float(pending_gbit), float(deadline_s), float(pending_gbit))

    def on_fetch_complete(self, worker_id: str, now_s: float) -> None:
        self.settle(now_s)
        if worker_id in self.records:
            self._finish(worker_id)

    def cancel(self, worker_id: str, now_s: float) -> None:
        """Drop a flow without completing it (worker torn down mid-fetch)."""
        self.settle(now_s)
        rec = self.records.pop(worker_id, None)
        if rec is not None:
            self.delivered[worker_id] = rec.delivered_gbit

    def next_completion_time(self) -> float | None:
        if not self.records:
            return None
        smallest = min(r.pending_gbit for r in self.records.values())
        return self.last_change_s + max(smallest, 0.0) * len(self.records) / self.bandwidth

    def pop_finished(self, now_s: float, tol: float = FINISH_TOL_GBIT) -> list[str]:
        """Settle, then also retire flows left within ``tol`` of completion."""
        done = self.settle(now_s)
        near = [r.worker_id for r in self.records.values() if r.pending_gbit <= tol]
        for wid in near:
            self._finish(wid)
        return done + near

    def rows(self, now_s: float) -> list[dict]:
        return [
            {"time_s": now_s, "server_id": self.server_id, "worker_id": r.worker_id,
             "pending_gbit": r.pending_gbit, "deadline_s": r.deadline_s,
             "n_flows": len(self.records), "last_change_s": self.last_change_s}
            for r in self.records.values()
        ]
