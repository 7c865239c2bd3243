import csv

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrasim.cluster import SloSpec
from hydrasim.metrics import cost_gb_seconds, slo_attainment, summarize, write_csv
from hydrasim.sim import Reservation
from hydrasim.workload import RequestRecord

SLO = {"m": SloSpec(7.5, 0.2)}


def rec(i, ttft=None, out=4, tpot=0.1, rejected=False):
    r = RequestRecord(i, "m", 0.0, 16, out, rejected=rejected)
    if ttft is not None:
        r.first_token_s = ttft
        r.completion_s = ttft + tpot * (out - 1)
    return r


def test_ttft_attainment_two_thirds():
    recs = [rec(0, 1.0), rec(1, 8.0), rec(2, 3.0)]
    assert slo_attainment(recs, SLO) == pytest.approx(2 / 3)


def test_all_warm_meet_loose_slos():
    recs = [rec(i, 0.5) for i in range(5)]
    assert slo_attainment(recs, SLO, "ttft") == 1.0
    assert slo_attainment(recs, SLO, "tpot") == 1.0


def test_rejection_counts_as_violation():
    recs = [rec(i, 1.0) for i in range(10)] + [rec(10, rejected=True)]
    assert slo_attainment(recs, SLO) == pytest.approx(10 / 11)


def test_empty_is_none():
    assert slo_attainment([], SLO) is None
    # only single-token outputs: no TPOT defined
    assert slo_attainment([rec(0, 1.0, out=1)], SLO, "tpot") is None


def test_tpot_attainment():
    recs = [rec(0, 1.0, tpot=0.1), rec(1, 1.0, tpot=0.3), rec(2, 1.0, out=1)]
    assert slo_attainment(recs, SLO, "tpot") == pytest.approx(1 / 2)
    assert slo_attainment(recs, SLO, "both") == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        slo_attainment(recs, SLO, "e2e")


def res(gb, a, b):
    return Reservation("w", "m", "s", 0, gb, a, b)


def test_cost_examples():
    assert cost_gb_seconds([res(24, 0, 100)]) == 2400
    parts = [res(6, 0, 10) for _ in range(4)] + [res(24, 10, 100)]
    assert cost_gb_seconds(parts) == 2400
    assert cost_gb_seconds([]) == 0


def test_open_reservation_rejected():
    with pytest.raises(ValueError):
        Reservation("w", "m", "s", 0, 1.0, 0.0).gb_seconds


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0.5, 48), st.floats(0, 100), st.floats(0, 100)), max_size=10),
       st.floats(0, 200))
def test_cost_additive_over_time_split(items, cut):
    whole = []
    split = []
    for gb, a, d in items:
        b = a + d
        whole.append(res(gb, a, b))
        if a < cut < b:
            split += [res(gb, a, cut), res(gb, cut, b)]
        else:
            split.append(res(gb, a, b))
    assert cost_gb_seconds(split) == pytest.approx(cost_gb_seconds(whole), rel=1e-9, abs=1e-9)


def test_summarize_and_csv(tmp_path):
    recs = [rec(0, 1.0), rec(1, rejected=True), rec(2)]
    row = summarize(recs, SLO, [res(24, 0, 10)], policy="x")
    assert row["n_rejected"] == 1 and row["n_unfinished"] == 1
    assert row["cost_gb_s"] == 240
    assert row["ttft_attainment"] == pytest.approx(1 / 3)
    path = tmp_path / "s.csv"
    write_csv(path, [row])
    got = list(csv.DictReader(open(path)))
    assert got[0]["policy"] == "x"
    write_csv(tmp_path / "empty.csv", [], ["a", "b"])
    assert open(tmp_path / "empty.csv").read().strip() == "a,b"
