"""Command line entry point: generate, plan, serve, replay, analyze, sweep."""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from . import analyzer
from .errors import RecShardError
from .generate import ARCHETYPES, generate_model
from .modelfile import load_spec, save_spec
from .planner import STRATEGIES, SINGULAR, estimate_pooling_factors, load_plan, make_plan, save_plan, validate_plan
from .replayer import MODES, RunLog, WorkloadProfile, generate_requests, replay
from .tracing import MAIN_SHARD, Tracer, export_trace, merge_traces

log = logging.getLogger("recshard")


def _endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


# --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec = generate_model(args.archetype, args.scale, args.seed, args.pooling_scale)
    save_spec(spec, args.out)
    print(f"{spec.model_id}\ttables={len(spec.tables)}\tsparse_bytes={spec.sparse_bytes}\t"
          f"dense_bytes={spec.dense_bytes}\t-> {args.out}")
    return 0


def cmd_plan(args) -> int:
    spec = load_spec(args.model, mmap=True)
    profiles = None
    if args.workload:
        prof = WorkloadProfile.load(args.workload)
        profiles = estimate_pooling_factors(spec, generate_requests(spec, prof, args.sample))
    plan = make_plan(spec, args.strategy, args.shards, profiles, args.bin_limit)
    rep = validate_plan(spec, plan)
    if not rep.ok:
        for v in rep.violations:
            print(f"violation: {v}", file=sys.stderr)
        return 1
    save_plan(plan, args.out)
    sizes = plan.shard_bytes(spec)
    print(f"{plan.strategy}\tshards={plan.num_sparse_shards}\trpcs_per_batch={plan.rpcs_per_batch()}\t"
          f"plan_hash={plan.plan_hash}\tshard_bytes={','.join(map(str, sizes))}\t-> {args.out}")
    return 0


def _load_deployments(args):
    from .cluster import read_deployments

    pairs = list(zip(args.model or [], args.plan or []))
    if len(args.model or []) != len(args.plan or []):
        raise SystemExit("--model and --plan must be given the same number of times")
    if args.deployments:
        pairs += read_deployments(args.deployments)
    if not pairs:
        raise SystemExit("no deployments: pass --model/--plan or --deployments")
    specs = {}
    out = []
    for model_path, plan_path in pairs:
        if model_path not in specs:
            specs[model_path] = load_spec(model_path, mmap=True)
        spec, plan = specs[model_path], load_plan(plan_path)
        rep = validate_plan(spec, plan)
        if not rep.ok:
            raise SystemExit(f"{plan_path}: {rep.violations[0]}")
        out.append((spec, plan))
    return out


def cmd_serve(args) -> int:
    from .transport import Topology, serve_main, serve_sparse

    topo = Topology.load(args.topology)
    deployments = _load_deployments(args)
    shard_id = MAIN_SHARD if args.role == "main" else args.shard_id
    tracer = Tracer(shard_id, path=args.trace, enabled=args.trace is not None,
                    meta={"role": args.role, "deployments": len(deployments), "pid": os.getpid()})
    host = port = None
    if args.listen:
        host, port = _endpoint(args.listen)
    if args.role == "main":
        svc = serve_main(deployments, topo, tracer, args.workers, args.rpc_deadline, host, port)
    else:
        svc = serve_sparse(shard_id, deployments, topo, tracer, host, port)
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    svc.start()
    addr = svc.address
    log.info("%s shard %d listening on %s:%d (%d deployments)", args.role, shard_id, addr[0], addr[1],
             len(deployments))
    if args.ready_file:
        tmp = f"{args.ready_file}.tmp"
        with open(tmp, "w") as f:
            f.write(f"{addr[0]}:{addr[1]}\n")
        os.replace(tmp, args.ready_file)
    stop.wait()
    log.info("draining")
    svc.stop()
    return 0


def cmd_replay(args) -> int:
    from .transport import MainClient, Topology

    spec = load_spec(args.model, mmap=True)
    prof = WorkloadProfile.load(args.workload)
    over = {}
    if args.mode:
        over["mode"] = args.mode
    if args.qps is not None:
        over["target_qps"] = args.qps
    if args.count is not None:
        over["n_requests"], over["duration_s"] = args.count, None
    if args.duration is not None:
        over["duration_s"], over["n_requests"] = args.duration, None
    if args.seed is not None:
        over["seed"] = args.seed
    if args.batch_size is not None:
        over["batch_size"] = None if args.batch_size == 0 else args.batch_size
    prof = WorkloadProfile(**{**prof.__dict__, **over})
    plan_key = load_plan(args.plan).plan_hash if args.plan else ""
    if args.endpoint:
        ep = _endpoint(args.endpoint)
    elif args.topology:
        ep = Topology.load(args.topology).main
    else:
        raise SystemExit("need --endpoint or --topology")
    requests = generate_requests(spec, prof)
    client = MainClient(ep, timeout=args.timeout)
    try:
        runlog = replay(requests, client, prof, plan_key, meta={"model_id": spec.model_id})
    finally:
        client.close()
    runlog.save(args.out)
    lat = runlog.latencies_ns()
    line = f"requests={len(runlog.records)}\tfailed={runlog.failures}\tachieved_qps={runlog.achieved_qps():.2f}"
    if len(lat):
        line += "".join(f"\tp{p}_ms={analyzer.percentile(lat.tolist(), p) / 1e6:.3f}" for p in analyzer.PERCENTILES)
    print(line + f"\t-> {args.out}")
    return 0


# --------------------------------------------------------------------------
# analyze


def _merged_for(trace_paths, runlog_path):
    from .sweep import select_traces

    merged = merge_traces(trace_paths)
    runlog = RunLog.load(runlog_path) if runlog_path else None
    if runlog is not None:
        merged = select_traces(merged, runlog)
    return merged, runlog


def cmd_attribute(args) -> int:
    merged, runlog = _merged_for(args.traces, args.runlog)
    meta = dict(runlog.meta) if runlog else {}
    rep = analyzer.attribute_run(merged, meta)
    prov = {k: meta.get(k, "") for k in ("seed", "plan_hash", "workload_hash", "model_id")}
    prov.update(orphans=len(merged.orphans), corrupt=merged.corrupt, skipped=rep.skipped,
                negative_network=rep.negative_network)
    analyzer.write_tsv(args.out, analyzer.ATTRIBUTION_COLUMNS, analyzer.attribution_rows(rep), prov)
    rows = analyzer.percentile_rows(rep, args.label) if rep.attributions else []
    pct_path = Path(args.out).with_name(Path(args.out).stem + "-percentiles.tsv")
    analyzer.write_tsv(pct_path, analyzer.PERCENTILE_COLUMNS, rows, prov)
    if args.fig_dir and rows:
        from . import report

        Path(args.fig_dir).mkdir(parents=True, exist_ok=True)
        norm = analyzer.normalize_stacks(rows)
        for r in norm:
            r["config"] = f"{args.label or 'run'} P{r['percentile']}"
        report.stack_figure(norm, Path(args.fig_dir) / "stack.png")
        emb_keys = [f"emb_{k}" for k in analyzer.EMBEDDED_LAYERS]
        emb = analyzer.normalize_stacks(rows, keys=emb_keys)
        for r in emb:
            r["config"] = f"{args.label or 'run'} P{r['percentile']}"
        report.embedded_stack_figure(emb, Path(args.fig_dir) / "embedded.png")
    print(f"requests={len(rep.attributions)}\tskipped={rep.skipped}\torphans={len(merged.orphans)}\t"
          f"max_totality_error={rep.max_totality_error():.4f}\t-> {args.out}")
    return 0


def cmd_compare(args) -> int:
    bm, bl = _merged_for(args.baseline_traces, args.baseline_log)
    cm, cl = _merged_for(args.candidate_traces, args.candidate_log)
    base = analyzer.RunData(bl, analyzer.attribute_run(bm, bl.meta))
    cand = analyzer.RunData(cl, analyzer.attribute_run(cm, cl.meta))
    rep = analyzer.compare_runs(base, cand)
    rows = analyzer.overhead_rows(args.label, rep)
    meta = {"seed": bl.meta.get("seed", ""), "workload_hash": bl.meta.get("workload_hash", ""),
            "baseline_plan": bl.meta.get("plan_hash", ""), "plan_hash": cl.meta.get("plan_hash", "")}
    analyzer.write_tsv(args.out, analyzer.OVERHEAD_COLUMNS, rows, meta)
    if args.fig_dir:
        from . import report

        Path(args.fig_dir).mkdir(parents=True, exist_ok=True)
        report.overhead_figure(rows, Path(args.fig_dir) / "overheads.png")
    print("\t".join(f"p{p}_ratio={rep.e2e_ratio[p]:.3f}" for p in analyzer.PERCENTILES)
          + f"\tcpu_ratio={rep.cpu_ratio:.3f}\trpc_ratio={rep.rpc_ratio:.3f}\t-> {args.out}")
    return 0


def cmd_export(args) -> int:
    merged = merge_traces(args.traces)
    pick = None
    for t in merged.traces:
        if args.trace_id and t.trace_id == int(args.trace_id, 16):
            pick = t
        elif args.trace_id is None and t.request_id == args.request_id:
            pick = t
    if pick is None:
        print("no matching trace", file=sys.stderr)
        return 1
    doc = export_trace(pick, args.out)
    lanes = len({e["pid"] for e in doc["traceEvents"]})
    print(f"trace_id={pick.trace_id:032x}\tlanes={lanes}\tevents={len(pick.events)}\t-> {args.out}")
    return 0


def cmd_per_shard(args) -> int:
    merged, runlog = _merged_for(args.traces, args.runlog)
    rows = analyzer.per_shard_rows(analyzer.per_shard_latencies(merged))
    meta = {k: (runlog.meta.get(k, "") if runlog else "") for k in ("seed", "plan_hash")}
    analyzer.write_tsv(args.out, analyzer.PER_SHARD_COLUMNS, rows, meta)
    if args.fig_dir and rows:
        from . import report

        Path(args.fig_dir).mkdir(parents=True, exist_ok=True)
        report.per_shard_figure(rows, Path(args.fig_dir) / "per_shard.png")
    print(f"shards={len(rows)}\t-> {args.out}")
    return 0


# --------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    from .sweep import run_configs, write_outputs

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = generate_model(args.archetype, args.scale, args.seed, args.pooling_scale)
    model_path = out / "model.bin"
    save_spec(spec, model_path)
    if args.workload:
        prof = WorkloadProfile.load(args.workload)
    else:
        prof = WorkloadProfile(seed=args.seed, batch_size=args.batch_size or None, n_requests=args.count)
    if args.mode:
        prof = WorkloadProfile(**{**prof.__dict__, "mode": args.mode, "target_qps": args.qps or prof.target_qps})
    requests = generate_requests(spec, prof)
    plans = {"singular": make_plan(spec, SINGULAR)}
    for strat in args.strategies.split(","):
        if strat == SINGULAR:
            continue
        ks = [1] if strat == "one_shard" else [int(k) for k in args.shards.split(",")]
        for k in ks:
            plans[strat if strat == "one_shard" else f"{strat}-{k}"] = make_plan(spec, strat, k)
    results = run_configs(out / "runs", spec, model_path, plans, requests, prof, args.rpc_delay_ms, args.workers,
                          interleave=args.interleave)
    for path in write_outputs(results, out, "singular", figures=not args.no_figures):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="recshard", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="write a synthetic model file")
    p.add_argument("--archetype", choices=ARCHETYPES, required=True)
    p.add_argument("--scale", required=True, help="byte budget, e.g. 64MiB")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pooling-scale", type=float, default=1.0)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("plan", help="shard a model")
    p.add_argument("--model", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, required=True)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--bin-limit", type=int, default=None, help="NSBP bin limit in bytes")
    p.add_argument("--workload", help="estimate pooling factors from this workload profile")
    p.add_argument("--sample", type=int, default=1000)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("serve", help="run a main or sparse shard")
    p.add_argument("--role", choices=("main", "sparse"), required=True)
    p.add_argument("--shard-id", type=int, default=0)
    p.add_argument("--model", action="append")
    p.add_argument("--plan", action="append")
    p.add_argument("--deployments", help="TSV of model<TAB>plan lines")
    p.add_argument("--topology", required=True)
    p.add_argument("--listen", help="override the topology endpoint (host:port, port 0 = any)")
    p.add_argument("--ready-file", help="write the bound host:port here once listening")
    p.add_argument("--trace", help="trace output file; tracing is off without it")
    p.add_argument("--workers", type=int, default=None, help="batch workers (default: cpu count)")
    p.add_argument("--rpc-deadline", type=float, default=1.0, help="per-RPC deadline in seconds")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="send a generated workload to a main shard")
    p.add_argument("--model", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--plan", help="plan file selecting the deployment")
    p.add_argument("--endpoint")
    p.add_argument("--topology")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--qps", type=float)
    p.add_argument("--count", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, help="0 = one batch per request")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_replay)

    pa = sub.add_parser("analyze", help="offline trace analysis").add_subparsers(dest="what", required=True)
    p = pa.add_parser("attribute", help="per-request five-layer latency stacks")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--runlog")
    p.add_argument("--label", default="")
    p.add_argument("--fig-dir")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_attribute)

    p = pa.add_parser("compare", help="latency / CPU / RPC ratios against a baseline run")
    p.add_argument("--baseline-log", required=True)
    p.add_argument("--baseline-traces", nargs="+", required=True)
    p.add_argument("--candidate-log", required=True)
    p.add_argument("--candidate-traces", nargs="+", required=True)
    p.add_argument("--label", default="candidate")
    p.add_argument("--fig-dir")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = pa.add_parser("export-trace", help="trace-event JSON for one request")
    p.add_argument("--traces", nargs="+", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--request-id", type=int)
    g.add_argument("--trace-id")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_export)

    p = pa.add_parser("per-shard", help="per-shard operator latency distributions")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--runlog")
    p.add_argument("--fig-dir")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_per_shard)

    p = sub.add_parser("sweep", help="generate, shard, serve and replay one model under several plans")
    p.add_argument("--archetype", choices=ARCHETYPES, default="long_tail")
    p.add_argument("--scale", default="16MiB")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pooling-scale", type=float, default=1.0)
    p.add_argument("--strategies", default="one_shard,capacity_balanced,load_balanced,nsbp")
    p.add_argument("--shards", default="2,4,8")
    p.add_argument("--workload")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32, help="0 = one batch per request")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--qps", type=float)
    p.add_argument("--rpc-delay-ms", type=float, default=0.0)
    p.add_argument("--workers", type=int)
    p.add_argument("--interleave", type=int, default=0,
                   help="serial mode: alternate configs every N requests instead of running them back to back")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (RecShardError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
