"""SLO attainment, GPU cost and CSV output for simulation results."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from hydrasim.cluster import SloSpec
from hydrasim.workload import RequestRecord


def slo_attainment(records: Sequence[RequestRecord], slos: Mapping[str, SloSpec],
                   metric: str = "ttft") -> float | None:
    """Fraction of requests meeting their SLO, or None when nothing qualifies.

    Rejected and unfinished requests count as violations. For ``tpot`` only
    requests with at least two output tokens qualify; ``both`` needs TTFT
    and (where defined) TPOT to hold.
    """
    if metric not in ("ttft", "tpot", "both"):
        raise ValueError(f"unknown metric {metric!r}")
    met = total = 0
    for r in records:
        slo = slos[r.model_id]
        if metric == "tpot" and r.output_tokens < 2:
            continue
        total += 1
        ok_ttft = r.ttft_s is not None and r.ttft_s <= slo.ttft_slo_s
        if r.output_tokens < 2:
            ok_tpot = r.completion_s is not None
        else:
            ok_tpot = r.tpot_s is not None and r.tpot_s <= slo.tpot_slo_s
        ok = {"ttft": ok_ttft, "tpot": ok_tpot, "both": ok_ttft and ok_tpot}[metric]
        met += ok
    if total == 0:
        return None
    return met / total


def cost_gb_seconds(reservations: Iterable) -> float:
    """Sum of reserved GB times seconds held."""
    return float(sum(r.gb_seconds for r in reservations))


def percentile(values: Sequence[float], q: float) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.percentile(vals, q))


def mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(records: Sequence[RequestRecord], slos: Mapping[str, SloSpec],
              reservations: Iterable, **extra) -> dict:
    ttfts = [r.ttft_s for r in records]
    tpots = [r.tpot_s for r in records]
    row = dict(extra)
    row.update({
        "n_requests": len(records),
        "n_rejected": sum(r.rejected for r in records),
        "n_unfinished": sum(r.completion_s is None and not r.rejected for r in records),
        "n_cold": sum(r.cold_start for r in records),
        "ttft_attainment": slo_attainment(records, slos, "ttft"),
        "tpot_attainment": slo_attainment(records, slos, "tpot"),
        "ttft_mean_s": mean(ttfts),
        "ttft_p50_s": percentile(ttfts, 50),
        "ttft_p99_s": percentile(ttfts, 99),
        "tpot_mean_s": mean(tpots),
        "cost_gb_s": cost_gb_seconds(reservations),
    })
    return row


REQUEST_FIELDS = ["request_id", "model_id", "arrival_s", "input_tokens", "output_tokens",
                  "first_token_s", "completion_s", "ttft_s", "tpot_s", "cold_start", "rejected"]


def request_rows(records: Iterable[RequestRecord]) -> list[dict]:
    return [{
        "request_id": r.request_id, "model_id": r.model_id, "arrival_s": r.arrival_s,
        "input_tokens": r.input_tokens, "output_tokens": r.output_tokens,
        "first_token_s": r.first_token_s, "completion_s": r.completion_s,
        "ttft_s": r.ttft_s, "tpot_s": r.tpot_s, "cold_start": int(r.cold_start),
        "rejected": int(r.rejected),
    } for r in records]


def write_csv(path: str | Path, rows: Sequence[dict], fieldnames: Sequence[str] | None = None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})
