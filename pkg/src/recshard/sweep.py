"""Run one workload against several sharding plans and tabulate the results.

All plans are served by a single local cluster (deployments are keyed by plan
hash), configurations are replayed one after another, and each run's traces
are picked out of the shared trace files by the trace ids in its run log.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .analyzer import (
    ATTRIBUTION_COLUMNS, OVERHEAD_COLUMNS, PER_SHARD_COLUMNS, PERCENTILE_COLUMNS, AttributionReport, RunData,
    attribute_run, attribution_rows, compare_runs, normalize_stacks, overhead_rows, per_shard_latencies,
    per_shard_rows, percentile_rows, write_tsv,
)
from .cluster import LocalCluster
from .model import ModelSpec
from .planner import ShardPlan, save_plan
from .replayer import SERIAL, RunLog, WorkloadProfile, replay
from .tracing import MergedTraces, merge_traces

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    label: str
    plan: ShardPlan
    runlog: RunLog
    merged: MergedTraces
    report: AttributionReport

    @property
    def data(self) -> RunData:
        return RunData(self.runlog, self.report)


def select_traces(merged: MergedTraces, runlog: RunLog) -> MergedTraces:
    wanted = {r.trace_id for r in runlog.records}
    return MergedTraces([t for t in merged.traces if t.trace_id in wanted],
                        [o for o in merged.orphans if o.trace_id in wanted], merged.corrupt,
                        [t for t in merged.multi_root if t in wanted])


def _replay_interleaved(client, plans: dict[str, ShardPlan], requests, profile: WorkloadProfile, chunk: int,
                        meta_of) -> dict[str, RunLog]:
    """Serial replay in rounds of ``chunk`` requests, rotating through the plans.

    Slow drift of the host (other tenants, thermal state) then lands on every
    configuration alike instead of on whichever happened to run last.
    """
    origin = time.perf_counter_ns()
    records: dict[str, list] = {label: [] for label in plans}
    metas: dict[str, dict] = {}
    for i in range(0, len(requests), chunk):
        for label, plan in plans.items():
            part = replay(requests[i:i + chunk], client, profile, plan.plan_hash, meta=meta_of(label, plan),
                          origin_ns=origin)
            records[label] += part.records
            metas.setdefault(label, {**part.meta, "n_requests": len(requests), "interleave": chunk})
    return {label: RunLog(metas[label], records[label]) for label in plans}


def run_configs(workdir, spec: ModelSpec, model_path, plans: dict[str, ShardPlan], requests, profile: WorkloadProfile,
                rpc_delay_ms: float = 0.0, workers: int | None = None, warmup: int = 3,
                trace: bool = True, interleave: int = 0) -> dict[str, RunResult]:
    """Serve every plan from one cluster and replay ``requests`` against each.

    Configurations run one after another, or, for serial workloads with
    ``interleave`` > 0, alternate in rounds of that many requests.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for label, plan in plans.items():
        path = workdir / f"plan-{label}.txt"
        save_plan(plan, path)
        pairs.append((str(model_path), str(path)))
    k = max(1, max(p.num_sparse_shards for p in plans.values()))
    logs: dict[str, RunLog] = {}

    def meta_of(label, plan):
        return {"model_id": spec.model_id, "config": label, "strategy": plan.strategy,
                "shards": plan.num_sparse_shards, "rpc_delay_ms": rpc_delay_ms}

    with LocalCluster(workdir / "cluster", pairs, k, rpc_delay_ms, trace=trace, workers=workers) as cluster:
        client = cluster.client()
        try:
            if warmup:
                warm = WorkloadProfile(**{**profile.__dict__, "mode": SERIAL})
                for plan in plans.values():
                    replay(requests[:warmup], client, warm, plan.plan_hash)
            if interleave > 0 and profile.mode == SERIAL:
                log.info("replaying %d requests against %d configs, interleaved by %d", len(requests), len(plans),
                         interleave)
                logs = _replay_interleaved(client, plans, requests, profile, interleave, meta_of)
            else:
                for label, plan in plans.items():
                    log.info("replaying %d requests against %s", len(requests), label)
                    logs[label] = replay(requests, client, profile, plan.plan_hash, meta=meta_of(label, plan))
            for label in plans:
                logs[label].save(workdir / f"runlog-{label}.tsv")
        finally:
            client.close()
        cluster.stop()
        paths = cluster.trace_paths()
    merged = merge_traces(paths) if trace else MergedTraces([], [])
    out = {}
    for label, plan in plans.items():
        sub = select_traces(merged, logs[label])
        out[label] = RunResult(label, plan, logs[label], sub, attribute_run(sub, logs[label].meta))
    return out


def write_outputs(results: dict[str, RunResult], outdir, baseline: str | None = None, figures: bool = True) -> list[str]:
    """Delimited tables (and figures) behind the overhead, attribution, RPC/CPU and per-shard views."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    first = next(iter(results.values()))
    meta = {"seed": first.runlog.meta.get("seed", ""), "workload_hash": first.runlog.meta.get("workload_hash", ""),
            "model_id": first.runlog.meta.get("model_id", "")}
    plans = {label: r.plan.plan_hash for label, r in results.items()}
    meta["plan_hashes"] = ",".join(f"{k}:{v}" for k, v in plans.items())

    pct_rows, ov_rows, rpc_rows = [], [], []
    for label, r in results.items():
        if not r.report.attributions:
            continue
        write_tsv(outdir / f"attribution-{label}.tsv", ATTRIBUTION_COLUMNS, attribution_rows(r.report),
                  {**meta, "plan_hash": r.plan.plan_hash})
        written.append(str(outdir / f"attribution-{label}.tsv"))
        pct_rows += percentile_rows(r.report, label)
        n = len(r.report.attributions)
        rpc_rows.append({"config": label, "plan_hash": r.plan.plan_hash, "requests": n,
                         "rpcs_per_request": r.report.total_rpcs() / n,
                         "cpu_ms_per_request": r.report.total_cpu_ns() / n / 1e6})
        if baseline and baseline in results and results[baseline].report.attributions:
            ov_rows += overhead_rows(label, compare_runs(results[baseline].data, r.data))
    write_tsv(outdir / "percentile_stacks.tsv", PERCENTILE_COLUMNS, pct_rows, meta)
    written.append(str(outdir / "percentile_stacks.tsv"))
    write_tsv(outdir / "rpc_cpu.tsv", ("config", "plan_hash", "requests", "rpcs_per_request", "cpu_ms_per_request"),
              rpc_rows, meta)
    written.append(str(outdir / "rpc_cpu.tsv"))
    if ov_rows:
        write_tsv(outdir / "overheads.tsv", OVERHEAD_COLUMNS, ov_rows, {**meta, "baseline": baseline})
        written.append(str(outdir / "overheads.tsv"))
    widest = max(results.values(), key=lambda r: r.plan.num_sparse_shards)
    shard_rows = per_shard_rows(per_shard_latencies(widest.merged)) if widest.merged.traces else []
    write_tsv(outdir / "per_shard.tsv", PER_SHARD_COLUMNS, shard_rows, {**meta, "config": widest.label})
    written.append(str(outdir / "per_shard.tsv"))

    if figures and pct_rows:
        from . import report

        for p in (50, 99):
            rows = normalize_stacks([r for r in pct_rows if r["percentile"] == p])
            written.append(report.stack_figure(rows, outdir / f"stack_p{p}.png", title=f"P{p} latency stack"))
            emb_keys = [k for k in rows[0] if k.startswith("emb_")]
            emb = normalize_stacks([r for r in pct_rows if r["percentile"] == p], keys=emb_keys)
            written.append(report.embedded_stack_figure(emb, outdir / f"embedded_p{p}.png",
                                                        title=f"P{p} embedded portion, bounding shard"))
        written.append(report.rpc_cpu_figure(rpc_rows, outdir / "rpc_cpu.png"))
        if ov_rows:
            written.append(report.overhead_figure(ov_rows, outdir / "overheads.png"))
        if shard_rows:
            written.append(report.per_shard_figure(shard_rows, outdir / "per_shard.png"))
    return written
