"""Command-line entry point: ``hydrasim {predict,allocate,simulate,sweep}``.

Output files (all CSV with a fixed header):

* ``requests.csv``: one row per request (see ``metrics.REQUEST_FIELDS``).
* ``summary.csv``: one row of aggregate metrics per run.
* ``utilization.csv``: accelerator memory after every change.
* ``sweep.csv``: one row per (cv, rps, policy) cell, in grid order.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import yaml

from hydrasim.allocator import AllocationError, allocate_choice, enumerate_choices, sharing_score
from hydrasim.cluster import ClusterSnapshot, ModelProfile, SloSpec, StageTimings
from hydrasim.metrics import REQUEST_FIELDS, request_rows, summarize, write_csv
from hydrasim.predictor import (
    PredictionInput,
    predict_tpot,
    predict_ttft_basic,
    predict_ttft_overlapped,
    select_servers,
)
from hydrasim.scenario import CONSOLIDATION, POLICIES, Scenario, ScenarioError
from hydrasim.sim import simulate
from hydrasim.workload import APPS, AppModel, WorkloadError, TraceSeries, bundled_trace, build_scenario

SUMMARY_FIELDS = ["policy", "cv", "rps", "seed", "n_requests", "n_rejected", "n_unfinished",
                  "n_cold", "ttft_attainment", "tpot_attainment", "ttft_mean_s", "ttft_p50_s",
                  "ttft_p99_s", "tpot_mean_s", "cost_gb_s"]
UTIL_FIELDS = ["time_s", "server_id", "gpu_index", "reserved_gb", "capacity_gb", "n_workers"]


class CliError(ValueError):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        text = (resources.files("hydrasim") / "data" / "testbed.yaml").read_text()
    else:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file {p} not found")
        text = p.read_text()
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise CliError(f"malformed config: {e}") from e
    if not isinstance(d, dict):
        raise CliError("config must be a mapping")
    return d


def load_catalog(d: dict[str, Any]) -> list[tuple[ModelProfile, float, float]]:
    out = []
    for m in d.get("catalog") or []:
        m = dict(m)
        try:
            warm = (float(m.pop("warm_ttft_s")), float(m.pop("warm_tpot_s")))
        except KeyError as e:
            raise CliError(f"catalog entry lacks {e}") from None
        out.append((ModelProfile.from_dict(m), *warm))
    return out


# predict

def _predict_inputs_from_config(args) -> PredictionInput:
    """Profile and timings from a config; links from the best-ranked idle servers."""
    d = load_config(args.config)
    sc = Scenario.from_dict({k: v for k, v in d.items() if k != "catalog"})
    profiles = {p.model_id: p for p, _, _ in load_catalog(d)}
    profiles.update({m: e.profile for m, e in sc.models.items()})
    if args.model not in profiles:
        raise CliError(f"unknown model {args.model!r}; known: {sorted(profiles)}")
    profile = profiles[args.model]
    mem = sc.memory
    full = [(s.server_id, s.ratio) for s in sc.servers if s.gpu_mem_gb >= mem.full_reservation(profile)]
    low = [(s.server_id, s.ratio) for s in sc.servers
           if s.gpu_mem_gb >= mem.low_reservation(profile, args.s)]
    ids = select_servers(full, low, args.s, args.w)
    if ids is None:
        raise CliError(f"cluster cannot host s={args.s}, w={args.w} for {args.model}")
    by_id = {s.server_id: s for s in sc.servers}
    links = tuple((by_id[i].nic_gbps, by_id[i].pcie_gbps) for i in ids)
    return PredictionInput(profile, sc.timings, args.s, args.w, links)


def cmd_predict(args) -> int:
    if args.config is not None or args.model is not None:
        if args.model is None:
            raise CliError("--config needs --model")
        inp = _predict_inputs_from_config(args)
    else:
        if args.size_gbit is None and args.size_gb is None:
            raise CliError("give --size-gbit/--size-gb or --config with --model")
        if args.prefill is None:
            raise CliError("--prefill is required without --config")
        size = args.size_gbit if args.size_gbit is not None else args.size_gb * 8
        profile = ModelProfile("cli", size, args.prefill, args.decode)
        total = args.runtime_total
        if total is None:
            total = args.container_create + args.cuda_init + args.library_load
        timings = StageTimings(args.container_create, args.cuda_init, args.library_load, total,
                               args.net_hop)
        if args.link:
            chosen = tuple(args.link)
        else:
            chosen = ((args.nic, args.pcie),) * args.s
        inp = PredictionInput(profile, timings, args.s, args.w, chosen)
    print(f"ttft_basic_s={predict_ttft_basic(inp):.10g}")
    print(f"ttft_overlapped_s={predict_ttft_overlapped(inp):.10g}")
    print(f"tpot_s={predict_tpot(inp.profile, inp.timings, inp.s, inp.w):.10g}")
    return 0


def _link(text: str) -> tuple[float, float]:
    try:
        b, p = text.split(":")
        return float(b), float(p)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NIC:PCIE in Gbps, got {text!r}")


# allocate

def cmd_allocate(args) -> int:
    d = load_config(args.config)
    sc = Scenario.from_dict({k: v for k, v in d.items() if k != "catalog"})
    profiles = {p.model_id: (p, t, o) for p, t, o in load_catalog(d)}
    profiles.update({m: (e.profile, None, None) for m, e in sc.models.items()})
    if args.model not in profiles:
        raise CliError(f"unknown model {args.model!r}; known: {sorted(profiles)}")
    profile, warm_ttft, warm_tpot = profiles[args.model]
    if args.ttft_slo is not None and args.tpot_slo is not None:
        slo = SloSpec(args.ttft_slo, args.tpot_slo)
    elif args.model in sc.models:
        slo = sc.models[args.model].slo
    else:
        from hydrasim.workload import derive_slos
        slo = derive_slos(warm_ttft, warm_tpot, args.app)
    snap = ClusterSnapshot.empty(sc.servers)
    sizes = args.sizes or range(1, 5)
    choice = allocate_choice(profile, slo, sc.timings, snap, mem=sc.memory,
                             overlapped=not args.basic, sizes=sizes)
    feasible = enumerate_choices(profile, slo, sc.timings, snap, mem=sc.memory,
                                 overlapped=not args.basic, sizes=sizes)
    if choice.fallback:
        feasible.append(choice)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["chosen", "s", "w", "servers", "gpus", "ttft_pred_s", "tpot_pred_s",
                "sharing_score", "fallback"])
    for c in feasible:
        w.writerow([int(c == choice), c.s, c.w, " ".join(c.plan.server_ids),
                    " ".join(str(e.gpu_index) for e in c.plan.servers),
                    f"{c.ttft_pred:.6f}", f"{c.tpot_pred:.6f}", sharing_score(c.plan, snap),
                    int(c.fallback)])
    return 0


# simulate / sweep

def catalog_for(d: dict[str, Any], apps: Sequence[str]) -> list[AppModel]:
    unknown = set(apps) - set(APPS)
    if unknown:
        raise CliError(f"unknown apps {sorted(unknown)}; expected a subset of {APPS}")
    base = load_catalog(d)
    if not base:
        raise CliError("config has no catalog to generate a workload from")
    return [AppModel(app, p, t, o) for app in apps for p, t, o in base]


def _trace(path: str | None, mode: str) -> TraceSeries | None:
    if mode != "trace":
        return None
    if path is None:
        return bundled_trace()
    if not Path(path).exists():
        raise CliError(f"trace file {path} not found")
    return TraceSeries.from_csv(path)


def scenario_from_config(d: dict[str, Any], *, cv: float, rps: float, policy: str,
                         seed: int = 0, horizon: float = 600.0, per_app: int = 4,
                         apps: Sequence[str] = APPS, trace_path: str | None = None,
                         rate_mode: str = "even", overrides: dict[str, Any] | None = None
                         ) -> Scenario:
    """Cluster and knobs from ``d``; requests sampled from its catalog unless given."""
    base = Scenario.from_dict({k: v for k, v in d.items() if k != "catalog"})
    if not base.requests and rps > 0:
        base = build_scenario(_trace(trace_path, rate_mode), catalog_for(d, apps), cv, rps,
                              per_app, horizon_s=horizon, seed=seed, rate_mode=rate_mode,
                              base=base)
    return base.with_config(policy=policy, **(overrides or {}))


def _overrides(args) -> dict[str, Any]:
    o = {}
    if args.consolidation:
        o["consolidation"] = args.consolidation
    if args.group_sizes:
        o["group_sizes"] = tuple(int(x) for x in args.group_sizes)
    if args.basic_predictor:
        o["basic_predictor"] = True
    return o


def cmd_simulate(args) -> int:
    d = load_config(args.config)
    sc = scenario_from_config(d, cv=args.cv, rps=args.rps, policy=args.policy or
                   (d.get("config") or {}).get("policy", "hydraserve"), seed=args.seed,
                   horizon=args.horizon, per_app=args.models_per_app, apps=args.apps,
                   trace_path=args.trace, rate_mode=args.rate_mode,
                   overrides={**_overrides(args), "trace_events": args.trace_events,
                              "dump_contention": args.dump_contention})
    res = simulate(sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    slos = {m: e.slo for m, e in sc.models.items()}
    write_csv(out / "requests.csv", request_rows(res.records), REQUEST_FIELDS)
    summary = summarize(res.records, slos, res.reservations, policy=sc.config.policy,
                        cv=args.cv, rps=args.rps, seed=args.seed)
    write_csv(out / "summary.csv", [summary], SUMMARY_FIELDS)
    write_csv(out / "utilization.csv", res.utilization, UTIL_FIELDS)
    if res.events is not None:
        write_csv(out / "events.csv", [dict(zip(("seq", "time_s", "kind", "subject"), e))
                                       for e in res.events], ["seq", "time_s", "kind", "subject"])
    if res.contention is not None:
        write_csv(out / "contention.csv", res.contention,
                  ["time_s", "server_id", "worker_id", "pending_gbit", "deadline_s",
                   "n_flows", "last_change_s"])
    if not args.quiet:
        for k in SUMMARY_FIELDS:
            print(f"{k}={summary.get(k)}")
    return 0


def run_cell(cell: dict[str, Any]) -> dict[str, Any]:
    """One sweep cell; module-level so worker processes can import it."""
    sc = scenario_from_config(cell["config"], cv=cell["cv"], rps=cell["rps"], policy=cell["policy"],
                   seed=cell["seed"], horizon=cell["horizon"], per_app=cell["per_app"],
                   apps=cell["apps"], trace_path=cell["trace"], rate_mode=cell["rate_mode"],
                   overrides=cell["overrides"])
    res = simulate(sc)
    slos = {m: e.slo for m, e in sc.models.items()}
    return summarize(res.records, slos, res.reservations, policy=cell["policy"], cv=cell["cv"],
                     rps=cell["rps"], seed=cell["seed"])


def sweep_cells(config: dict[str, Any], cvs, rpss, policies, *, seed=0, horizon=600.0,
                per_app=4, apps=APPS, trace=None, rate_mode="even", overrides=None) -> list[dict]:
    return [{"config": config, "cv": cv, "rps": rps, "policy": pol, "seed": seed,
             "horizon": horizon, "per_app": per_app, "apps": tuple(apps), "trace": trace,
             "rate_mode": rate_mode, "overrides": dict(overrides or {})}
            for cv in cvs for rps in rpss for pol in policies]


def run_sweep(cells: list[dict], jobs: int = 1) -> list[dict]:
    if jobs <= 1:
        return [run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        # map preserves grid order regardless of completion order
        return list(ex.map(run_cell, cells))


def cmd_sweep(args) -> int:
    d = load_config(args.config)
    for pol in args.policies:
        if pol not in POLICIES:
            raise CliError(f"unknown policy {pol!r}; expected one of {POLICIES}")
    catalog_for(d, args.apps)
    cells = sweep_cells(d, args.cv, args.rps, args.policies, seed=args.seed,
                        horizon=args.horizon, per_app=args.models_per_app, apps=args.apps,
                        trace=args.trace, rate_mode=args.rate_mode, overrides=_overrides(args))
    rows = run_sweep(cells, args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, rows, SUMMARY_FIELDS)
    if not args.quiet:
        print(f"wrote {len(rows)} rows to {out}")
    return 0


def _workload_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="scenario/testbed YAML (default: bundled testbed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=600.0, help="arrival horizon in seconds")
    p.add_argument("--models-per-app", type=int, default=4)
    p.add_argument("--apps", type=_str_list, default=list(APPS))
    p.add_argument("--trace", help="trace CSV (function_id,minute_index,count)")
    p.add_argument("--rate-mode", choices=("even", "trace"), default="even")
    p.add_argument("--consolidation", choices=CONSOLIDATION)
    p.add_argument("--group-sizes", type=_str_list, help="restrict pipeline sizes, e.g. 1,4")
    p.add_argument("--basic-predictor", action="store_true")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hydrasim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="TTFT/TPOT predictions for one configuration")
    p.add_argument("--config", help="scenario YAML for --model (default: bundled testbed)")
    p.add_argument("--model", help="model id in --config (catalog or models)")
    size = p.add_mutually_exclusive_group()
    size.add_argument("--size-gbit", type=float)
    size.add_argument("--size-gb", type=float)
    p.add_argument("--prefill", type=float, help="single-GPU prefill time (s)")
    p.add_argument("--decode", type=float, default=0.05, help="single-GPU decode time (s)")
    p.add_argument("--container-create", type=float, default=0.0)
    p.add_argument("--cuda-init", type=float, default=0.0)
    p.add_argument("--library-load", type=float, default=0.0)
    p.add_argument("--runtime-total", type=float, help="sequential container+runtime time")
    p.add_argument("--net-hop", type=float, default=0.0)
    p.add_argument("-s", type=int, default=1, help="pipeline size")
    p.add_argument("-w", type=int, default=0, help="full-memory workers")
    p.add_argument("--nic", type=float, default=16.0)
    p.add_argument("--pcie", type=float, default=128.0)
    p.add_argument("--link", type=_link, action="append",
                   help="per-worker NIC:PCIE in Gbps; repeat s times")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("allocate", help="allocation for one model on an idle cluster")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--app", choices=APPS, default="code")
    p.add_argument("--ttft-slo", type=float)
    p.add_argument("--tpot-slo", type=float)
    p.add_argument("--sizes", type=lambda t: [int(x) for x in _str_list(t)])
    p.add_argument("--basic", action="store_true")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("simulate", help="run one scenario")
    _workload_flags(p)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--cv", type=float, default=2.0)
    p.add_argument("--rps", type=float, default=0.0,
                   help="generate requests at this rate when the scenario has none")
    p.add_argument("--out", default="out")
    p.add_argument("--trace-events", action="store_true")
    p.add_argument("--dump-contention", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="CV x RPS x policy grid")
    _workload_flags(p)
    p.add_argument("--cv", type=_float_list, default=[2.0, 8.0])
    p.add_argument("--rps", type=_float_list, default=[0.4, 0.6])
    p.add_argument("--policies", type=_str_list, default=list(POLICIES))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ScenarioError, WorkloadError, AllocationError, ValueError) as e:
        print(f"hydrasim: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
