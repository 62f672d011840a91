"""Offline analysis of merged traces and run logs.

Every request's main-shard E2E is split into five layers by walking the span
tree along its critical path. Time spent waiting on sparse shards (and local
embedding ops in singular runs) forms the embedded portion, which is broken
down further using the slowest sparse shard of each RPC round. Network time
is never taken from cross-host timestamps: it is the main shard's
outstanding time for an RPC minus the sparse shard's own E2E.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, MalformedTrace, WorkloadMismatch
from .replayer import RunLog
from .tracing import (
    DENSE_OP, MAIN_SHARD, NET_OVERHEAD, RPC_SERDE, RPC_SERVICE, RPC_WAIT, SPARSE_OP, MergedTraces,
    RequestTrace, TraceEvent,
)

DENSE_OPS = "dense_ops"
EMBEDDED = "embedded_portion"
STACK_LAYERS = (DENSE_OPS, EMBEDDED, RPC_SERDE, RPC_SERVICE, NET_OVERHEAD)

SPARSE_OPS = "sparse_ops"
NETWORK = "network"
MAIN_WAIT = "main_wait"
REMOTE_NET = "remote_net_overhead"
EMBEDDED_LAYERS = (SPARSE_OPS, RPC_SERDE, RPC_SERVICE, REMOTE_NET, NETWORK, MAIN_WAIT)

PERCENTILES = (50, 90, 99)
TOTALITY_TOL = 0.01

_MAIN_LAYER = {DENSE_OP: DENSE_OPS, SPARSE_OP: EMBEDDED, RPC_WAIT: EMBEDDED,
               RPC_SERDE: RPC_SERDE, RPC_SERVICE: RPC_SERVICE, NET_OVERHEAD: NET_OVERHEAD}
_REMOTE_LAYER = {SPARSE_OP: SPARSE_OPS, RPC_SERDE: RPC_SERDE, RPC_SERVICE: RPC_SERVICE,
                 NET_OVERHEAD: REMOTE_NET, DENSE_OP: REMOTE_NET}


def percentile(values, p: float):
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    vals = sorted(values)
    if not vals:
        raise EmptyInput("percentile of an empty sequence")
    if not 0 < p <= 100:
        raise ValueError(f"percentile p must be in (0, 100], got {p}")
    rank = max(1, math.ceil(p / 100.0 * len(vals)))
    return vals[rank - 1]


def nearest_rank_index(values, p: float) -> int:
    """Position in ``values`` of the element :func:`percentile` would return."""
    if len(values) == 0:
        raise EmptyInput("percentile of an empty sequence")
    order = sorted(range(len(values)), key=lambda i: (values[i], i))
    rank = max(1, math.ceil(p / 100.0 * len(values)))
    return order[rank - 1]


@dataclass
class NetworkCounter:
    negative: int = 0
    total: int = 0


def network_latency(main_rpc_wait_ns: int, sparse_e2e_ns: int, counter: NetworkCounter | None = None) -> int:
    """Outstanding time at the main shard minus remote E2E, floored at zero."""
    est = main_rpc_wait_ns - sparse_e2e_ns
    if counter is not None:
        counter.total += 1
        if est < 0:
            counter.negative += 1
    return max(0, est)


@dataclass
class RpcRound:
    """One rpc_wait envelope: the concurrently issued RPCs for one net and batch."""

    envelope_ns: int
    bounding_shard: int
    outstanding_ns: int
    remote_e2e_ns: int
    network_ns: int
    rpcs: int


@dataclass
class Attribution:
    request_id: int
    trace_id: int
    e2e_ns: int
    layers: dict[str, int]
    embedded: dict[str, int]
    unattributed_ns: int
    rounds: list[RpcRound] = field(default_factory=list)
    rpc_count: int = 0
    rpcs_per_batch: dict[int, int] = field(default_factory=dict)
    cpu_ns: dict[int, int] = field(default_factory=dict)
    network_ns: list[int] = field(default_factory=list)  # every RPC, not just bounding ones
    negative_network: int = 0

    @property
    def total_cpu_ns(self) -> int:
        return sum(self.cpu_ns.values())

    @property
    def stack_sum(self) -> int:
        return sum(self.layers.values())

    def totality_error(self) -> float:
        return abs(self.stack_sum - self.e2e_ns) / self.e2e_ns if self.e2e_ns else 0.0

    def bounding_network_ns(self) -> int:
        return sum(r.network_ns for r in self.rounds)


def _remote_root(trace: RequestTrace, rpc: TraceEvent) -> TraceEvent | None:
    kids = [c for c in trace.children(rpc) if c.shard_id != MAIN_SHARD]
    return kids[0] if kids else None


def _leaves(trace: RequestTrace, span: TraceEvent):
    """Non-async leaf spans under ``span`` on the same shard."""
    kids = [c for c in trace.children(span) if c.shard_id == span.shard_id and not c.is_async]
    if not kids:
        yield span
        return
    for c in kids:
        yield from _leaves(trace, c)


def attribute_request(trace: RequestTrace) -> Attribution:
    root = trace.root
    if root.shard_id != MAIN_SHARD or root.parent_span_id != 0:
        raise MalformedTrace(f"trace {trace.trace_id:032x}: root is not a main-shard E2E span")
    layers = dict.fromkeys(STACK_LAYERS, 0)
    embedded = dict.fromkeys(EMBEDDED_LAYERS, 0)
    rounds: list[RpcRound] = []
    counter = NetworkCounter()
    all_network: list[int] = []
    unattributed = 0

    def envelope(span: TraceEvent) -> None:
        rpcs = [c for c in trace.children(span) if c.is_async]
        if not rpcs:
            embedded[MAIN_WAIT] += span.dur_ns
            return
        best = None
        for rpc in rpcs:
            remote = _remote_root(trace, rpc)
            if remote is None:
                raise MalformedTrace(f"trace {trace.trace_id:032x}: rpc to shard "
                                     f"{(rpc.args or {}).get('dst_shard')} has no sparse-side span")
            net = network_latency(rpc.dur_ns, remote.dur_ns, counter)
            all_network.append(net)
            key = (remote.dur_ns, -remote.shard_id)
            if best is None or key > best[0]:
                best = (key, rpc, remote, net)
        _, rpc, remote, net = best
        sub = dict.fromkeys(EMBEDDED_LAYERS, 0)
        covered = 0
        for leaf in _leaves(trace, remote):
            if leaf is remote:
                break
            sub[_REMOTE_LAYER.get(leaf.layer, REMOTE_NET)] += leaf.dur_ns
            covered += leaf.dur_ns
        # remote time outside its phases is service boilerplate
        sub[RPC_SERVICE] += max(0, remote.dur_ns - covered)
        sub[NETWORK] += net
        # the bounding shard's remote breakdown can exceed the envelope only through clock noise
        used = sum(sub.values())
        if used > span.dur_ns and used:
            scale = span.dur_ns / used
            for k in sub:
                sub[k] = int(sub[k] * scale)
            used = sum(sub.values())
        sub[MAIN_WAIT] += span.dur_ns - used
        for k, v in sub.items():
            embedded[k] += v
        rounds.append(RpcRound(span.dur_ns, remote.shard_id, rpc.dur_ns, remote.dur_ns, net, len(rpcs)))

    def walk(span: TraceEvent) -> None:
        nonlocal unattributed
        kids = [c for c in trace.children(span) if c.shard_id == MAIN_SHARD and not c.is_async]
        if not kids:
            layer = _MAIN_LAYER.get(span.layer)
            if layer is None:
                raise MalformedTrace(f"unknown layer {span.layer!r}")
            layers[layer] += span.dur_ns
            if span.layer == RPC_WAIT:
                envelope(span)
            elif span.layer == SPARSE_OP:
                embedded[SPARSE_OPS] += span.dur_ns
            return
        parallel = any(b.start_ns < a.end_ns for a, b in zip(kids, kids[1:]))
        if parallel:
            # concurrent batches: follow the one that finishes last
            bound = max(kids, key=lambda c: (c.end_ns, -c.start_ns))
            slack = span.dur_ns - bound.dur_ns
            layers[_MAIN_LAYER.get(span.layer, NET_OVERHEAD)] += max(0, slack)
            walk(bound)
            return
        covered = 0
        for c in kids:
            walk(c)
            covered += c.dur_ns
        gap = span.dur_ns - covered
        if span is root:
            unattributed += gap
        else:
            # a container's time outside its children is its own overhead
            layers[_MAIN_LAYER.get(span.layer, NET_OVERHEAD)] += max(0, gap)

    walk(root)

    per_batch: dict[int, int] = defaultdict(int)
    ok_rpcs = [r for r in trace.rpc_spans() if not (r.args or {}).get("failed")]
    for r in ok_rpcs:
        per_batch[int((r.args or {}).get("batch", 0))] += 1
    cpu: dict[int, int] = defaultdict(int)
    for e in trace.events:
        if e.is_async:
            continue
        if not any(c.shard_id == e.shard_id and not c.is_async for c in trace.children(e)):
            cpu[e.shard_id] += e.cpu_ns

    return Attribution(
        request_id=trace.request_id, trace_id=trace.trace_id, e2e_ns=root.dur_ns, layers=layers,
        embedded=embedded, unattributed_ns=unattributed, rounds=rounds, rpc_count=len(ok_rpcs),
        rpcs_per_batch=dict(sorted(per_batch.items())), cpu_ns=dict(sorted(cpu.items())),
        network_ns=all_network, negative_network=counter.negative,
    )


@dataclass
class AttributionReport:
    attributions: list[Attribution]
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def e2e(self) -> list[int]:
        return [a.e2e_ns for a in self.attributions]

    def stack_at(self, p: float) -> Attribution:
        """The request sitting at the nearest-rank percentile of E2E."""
        return self.attributions[nearest_rank_index(self.e2e(), p)]

    def layer_percentile(self, layer: str, p: float) -> int:
        return percentile([a.layers[layer] for a in self.attributions], p)

    def embedded_percentile(self, key: str, p: float) -> int:
        return percentile([a.embedded[key] for a in self.attributions], p)

    def network_percentile(self, p: float) -> int:
        return percentile([n for a in self.attributions for n in a.network_ns], p)

    @property
    def negative_network(self) -> int:
        return sum(a.negative_network for a in self.attributions)

    def total_cpu_ns(self) -> int:
        return sum(a.total_cpu_ns for a in self.attributions)

    def cpu_by_shard(self) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for a in self.attributions:
            for s, c in a.cpu_ns.items():
                out[s] += c
        return dict(sorted(out.items()))

    def total_rpcs(self) -> int:
        return sum(a.rpc_count for a in self.attributions)

    def max_totality_error(self) -> float:
        return max((a.totality_error() for a in self.attributions), default=0.0)


def attribute_run(merged: MergedTraces, meta: dict | None = None, strict: bool = False) -> AttributionReport:
    out, skipped = [], 0
    for t in merged.traces:
        try:
            out.append(attribute_request(t))
        except MalformedTrace:
            if strict:
                raise
            skipped += 1
    out.sort(key=lambda a: (a.request_id, a.trace_id))
    return AttributionReport(out, skipped, dict(meta or {}))


# --------------------------------------------------------------------------
# run comparison


@dataclass
class RunData:
    runlog: RunLog
    report: AttributionReport

    @property
    def meta(self) -> dict:
        return self.runlog.meta


@dataclass
class OverheadReport:
    e2e_ratio: dict[int, float]
    client_ratio: dict[int, float]
    cpu_ratio: float
    rpc_ratio: float
    embedded_ratio: dict[int, float]
    baseline_rpcs: int
    candidate_rpcs: int
    meta: dict = field(default_factory=dict)


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return a / b


def check_same_workload(base: RunLog, cand: RunLog) -> None:
    for key in ("seed", "workload_hash", "model_id"):
        a, b = base.meta.get(key), cand.meta.get(key)
        if a is not None and b is not None and str(a) != str(b):
            raise WorkloadMismatch(f"runs differ in {key}: {a} vs {b}")
        if (a is None) != (b is None):
            raise WorkloadMismatch(f"only one run records {key}")


def compare_runs(baseline: RunData, candidate: RunData) -> OverheadReport:
    """Candidate-over-baseline ratios of latency percentiles, CPU and RPC counts."""
    check_same_workload(baseline.runlog, candidate.runlog)
    br, cr = baseline.report, candidate.report
    if not br.attributions or not cr.attributions:
        raise EmptyInput("both runs need at least one attributed request")
    bl, cl = baseline.runlog.latencies_ns(), candidate.runlog.latencies_ns()
    client = {p: (_ratio(percentile(cl, p), percentile(bl, p)) if len(bl) and len(cl) else math.nan)
              for p in PERCENTILES}
    return OverheadReport(
        e2e_ratio={p: _ratio(percentile(cr.e2e(), p), percentile(br.e2e(), p)) for p in PERCENTILES},
        client_ratio=client,
        cpu_ratio=_ratio(cr.total_cpu_ns(), br.total_cpu_ns()),
        rpc_ratio=_ratio(cr.total_rpcs(), br.total_rpcs()),
        embedded_ratio={p: _ratio(cr.layer_percentile(EMBEDDED, p), br.layer_percentile(EMBEDDED, p))
                        for p in PERCENTILES},
        baseline_rpcs=br.total_rpcs(), candidate_rpcs=cr.total_rpcs(),
        meta={"baseline_plan": baseline.meta.get("plan_hash", ""), "candidate_plan": candidate.meta.get("plan_hash", ""),
              "seed": baseline.meta.get("seed", "")},
    )


# --------------------------------------------------------------------------
# per-shard distributions


def per_shard_latencies(merged: MergedTraces) -> dict[int, dict[str, list[int]]]:
    """Per shard, per request: total sparse-op time and shard-local E2E."""
    out: dict[int, dict[str, list[int]]] = defaultdict(lambda: {"sparse_op_ns": [], "e2e_ns": []})
    for t in merged.traces:
        ops: dict[int, int] = defaultdict(int)
        e2e: dict[int, int] = defaultdict(int)
        for e in t.events:
            if e.layer == SPARSE_OP:
                ops[e.shard_id] += e.dur_ns
            if e.shard_id == MAIN_SHARD and e is t.root:
                e2e[MAIN_SHARD] += e.dur_ns
            elif e.shard_id != MAIN_SHARD and e.parent_span_id in t._by_id and t.span(e.parent_span_id).shard_id == MAIN_SHARD:
                e2e[e.shard_id] += e.dur_ns
        for s in set(ops) | set(e2e):
            out[s]["sparse_op_ns"].append(ops.get(s, 0))
            out[s]["e2e_ns"].append(e2e.get(s, 0))
    return dict(sorted(out.items()))


# --------------------------------------------------------------------------
# delimited output


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_tsv(path, columns, rows, meta: dict | None = None) -> str:
    lines = [f"# {k}={v}" for k, v in sorted((meta or {}).items())]
    lines.append("\t".join(columns))
    lines += ["\t".join(_fmt(r.get(c, "")) for c in columns) for r in rows]
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    return text


def read_tsv(path) -> tuple[dict, list[dict]]:
    meta, rows, cols = {}, [], None
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                meta[k] = v
            elif cols is None:
                cols = line.split("\t")
            elif line:
                rows.append(dict(zip(cols, line.split("\t"))))
    return meta, rows


def attribution_rows(report: AttributionReport) -> list[dict]:
    rows = []
    for a in report.attributions:
        row = {"request_id": a.request_id, "trace_id": f"{a.trace_id:032x}", "e2e_ns": a.e2e_ns,
               "unattributed_ns": a.unattributed_ns, "rpc_count": a.rpc_count, "cpu_ns": a.total_cpu_ns,
               "bounding_network_ns": a.bounding_network_ns()}
        row.update(a.layers)
        row.update({f"emb_{k}": v for k, v in a.embedded.items()})
        rows.append(row)
    return rows


ATTRIBUTION_COLUMNS = (("request_id", "trace_id", "e2e_ns") + STACK_LAYERS
                       + tuple(f"emb_{k}" for k in EMBEDDED_LAYERS)
                       + ("unattributed_ns", "rpc_count", "cpu_ns", "bounding_network_ns"))


def percentile_rows(report: AttributionReport, label: str = "") -> list[dict]:
    """P50/P90/P99 stacks, each taken from the nearest-rank request."""
    rows = []
    for p in PERCENTILES:
        a = report.stack_at(p)
        row = {"config": label, "percentile": p, "request_id": a.request_id, "e2e_ns": a.e2e_ns,
               "rpc_count": a.rpc_count, "cpu_ns": a.total_cpu_ns}
        row.update(a.layers)
        row.update({f"emb_{k}": v for k, v in a.embedded.items()})
        rows.append(row)
    return rows


PERCENTILE_COLUMNS = (("config", "percentile", "request_id", "e2e_ns") + STACK_LAYERS
                      + tuple(f"emb_{k}" for k in EMBEDDED_LAYERS) + ("rpc_count", "cpu_ns"))


def normalize_stacks(rows: list[dict], keys=STACK_LAYERS) -> list[dict]:
    """Scale stacks by the E2E of the tallest configuration at the same percentile."""
    tallest: dict[int, float] = defaultdict(float)
    for r in rows:
        tallest[r["percentile"]] = max(tallest[r["percentile"]], float(r["e2e_ns"]))
    out = []
    for r in rows:
        denom = tallest[r["percentile"]] or 1.0
        n = dict(r)
        for k in keys:
            n[k] = float(r[k]) / denom
        n["e2e_norm"] = float(r["e2e_ns"]) / denom
        out.append(n)
    return out


def overhead_rows(label: str, rep: OverheadReport) -> list[dict]:
    rows = []
    for p in PERCENTILES:
        rows.append({"config": label, "percentile": p, "e2e_ratio": rep.e2e_ratio[p],
                     "client_ratio": rep.client_ratio[p], "embedded_ratio": rep.embedded_ratio[p],
                     "cpu_ratio": rep.cpu_ratio, "rpc_ratio": rep.rpc_ratio,
                     "baseline_rpcs": rep.baseline_rpcs, "candidate_rpcs": rep.candidate_rpcs})
    return rows


OVERHEAD_COLUMNS = ("config", "percentile", "e2e_ratio", "client_ratio", "embedded_ratio", "cpu_ratio",
                    "rpc_ratio", "baseline_rpcs", "candidate_rpcs")


def per_shard_rows(dist: dict[int, dict[str, list[int]]]) -> list[dict]:
    rows = []
    for s, d in dist.items():
        row = {"shard_id": s, "n": len(d["e2e_ns"])}
        for key in ("sparse_op_ns", "e2e_ns"):
            for p in PERCENTILES:
                row[f"{key}_p{p}"] = percentile(d[key], p)
        rows.append(row)
    return rows


PER_SHARD_COLUMNS = ("shard_id", "n") + tuple(f"{k}_p{p}" for k in ("sparse_op_ns", "e2e_ns") for p in PERCENTILES)


def summary(values) -> dict[str, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise EmptyInput("no values")
    return {"n": int(arr.size), "mean": float(arr.mean()), **{f"p{p}": float(percentile(arr.tolist(), p))
                                                               for p in PERCENTILES}}
