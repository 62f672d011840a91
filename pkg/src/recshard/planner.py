"""Shard planning: place embedding tables (or row partitions of them) on sparse shards.

Strategies:

* ``singular``          - no sparse shards, everything runs in-process on the main shard.
* ``one_shard``         - every table on sparse shard 0.
* ``capacity_balanced`` - LPT over table bytes.
* ``load_balanced``     - LPT over estimated pooling factor (bytes when all weights are zero).
* ``nsbp``              - net-specific bin packing: per-net first-fit-decreasing bins of a byte
                          limit; tables over the limit are row-split onto dedicated shards.

A row ``r`` of a table split into ``P`` partitions lives in partition ``r % P``
at local row ``r // P``.
"""

from __future__ import annotations

import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySample, InfeasibleCapacity, ParseError, PartitionRequired
from .model import CONCAT, USER, FLOAT_BYTES, ModelSpec, TableProfile

SINGULAR = "singular"
ONE_SHARD = "one_shard"
CAPACITY_BALANCED = "capacity_balanced"
LOAD_BALANCED = "load_balanced"
NSBP = "nsbp"
STRATEGIES = (SINGULAR, ONE_SHARD, CAPACITY_BALANCED, LOAD_BALANCED, NSBP)

DEFAULT_SAMPLE_SIZE = 1000


@dataclass(frozen=True, order=True)
class TablePartitionAssignment:
    table_id: int
    partition_index: int
    partition_count: int
    shard_id: int


@dataclass(frozen=True)
class RpcOpDescriptor:
    op_id: int
    net_id: int
    shard_id: int
    partitions: tuple[tuple[int, int], ...]  # (table_id, partition_index)


@dataclass
class ShardPlan:
    strategy: str
    model_id: str
    num_sparse_shards: int
    assignments: list[TablePartitionAssignment] = field(default_factory=list)
    rpc_ops: list[RpcOpDescriptor] = field(default_factory=list)
    bin_limit_bytes: int = 0
    requested_shards: int = 0

    def partition_count(self, table_id: int) -> int:
        for a in self.assignments:
            if a.table_id == table_id:
                return a.partition_count
        raise KeyError(table_id)

    def partitions_of(self, table_id: int) -> list[TablePartitionAssignment]:
        return sorted((a for a in self.assignments if a.table_id == table_id),
                      key=lambda a: a.partition_index)

    def shard_assignments(self, shard_id: int) -> list[TablePartitionAssignment]:
        return [a for a in self.assignments if a.shard_id == shard_id]

    def shards_for_net(self, net_id: int) -> list[int]:
        return sorted({op.shard_id for op in self.rpc_ops if op.net_id == net_id})

    @property
    def is_singular(self) -> bool:
        return self.strategy == SINGULAR

    def rpcs_per_batch(self) -> int:
        """Static upper bound: every shard hosting a net's tables is called once per net."""
        return len(self.rpc_ops)

    def predicted_rpc_count(self, n_batches: int) -> int:
        return n_batches * self.rpcs_per_batch()

    def shard_bytes(self, spec: ModelSpec) -> list[int]:
        out = [0] * self.num_sparse_shards
        for a in self.assignments:
            out[a.shard_id] += partition_bytes(spec.table(a.table_id).num_rows, spec.table(a.table_id).dim,
                                               a.partition_index, a.partition_count)
        return out

    def to_text(self) -> str:
        return format_plan(self)

    @property
    def plan_hash(self) -> str:
        return hashlib.sha256(_plan_body(self).encode()).hexdigest()[:16]


def partition_rows(num_rows: int, index: int, count: int) -> int:
    """Rows r in [0, num_rows) with r % count == index."""
    if index >= num_rows:
        return 0
    return (num_rows - 1 - index) // count + 1


def partition_bytes(num_rows: int, dim: int, index: int, count: int) -> int:
    return partition_rows(num_rows, index, count) * dim * FLOAT_BYTES


# --------------------------------------------------------------------------
# pooling factor estimation


def estimate_pooling_factors(spec: ModelSpec, requests) -> list[TableProfile]:
    """Mean lookups per inference item, per table, over a request sample.

    User-net tables are fed once per request; candidate-net tables once per
    candidate, so the item count differs between them.
    """
    requests = list(requests)
    if not requests:
        raise EmptySample("pooling-factor estimation needs at least one request")
    lookups: dict[int, int] = defaultdict(int)
    user_items = len(requests)
    cand_items = 0
    for req in requests:
        cand_items += req.n_candidates
        for tid, idx in req.user_sparse.items():
            lookups[tid] += len(idx)
        for tid, col in req.candidate_sparse.items():
            lookups[tid] += int(col.indices.size)
    out = []
    for t in sorted(spec.tables, key=lambda t: t.table_id):
        items = user_items if spec.net(t.net_id).role == USER else cand_items
        pf = lookups.get(t.table_id, 0) / items if items else 0.0
        out.append(TableProfile(t.table_id, pf, t.size_bytes))
    return out


def _profile_map(spec: ModelSpec, profiles) -> dict[int, TableProfile]:
    if profiles is None:
        profiles = spec.profiles
    m = {p.table_id: p for p in profiles}
    for t in spec.tables:
        if t.table_id not in m:
            m[t.table_id] = TableProfile(t.table_id, 0.0, t.size_bytes)
    return m


# --------------------------------------------------------------------------
# greedy primitives


def lpt_assign(weights: list[float], k: int) -> list[int]:
    """Largest-first into the least-loaded bin; ties go to the lowest bin index.

    ``weights`` must already be in placement order (heaviest first). Returns the
    bin index chosen for each weight.
    """
    loads = [0.0] * k
    out = []
    for w in weights:
        b = min(range(k), key=lambda i: (loads[i], i))
        loads[b] += w
        out.append(b)
    return out


def first_fit_decreasing(sizes: list[int], limit: int) -> list[int]:
    """Pack (already descending) ``sizes`` into bins of ``limit``; returns bin index per item."""
    bins: list[int] = []
    out = []
    for s in sizes:
        for i, used in enumerate(bins):
            if used + s <= limit:
                bins[i] += s
                out.append(i)
                break
        else:
            bins.append(s)
            out.append(len(bins) - 1)
    return out


# --------------------------------------------------------------------------
# strategies


def _finish(spec: ModelSpec, strategy: str, k: int, assignments, bin_limit: int = 0,
            requested: int = 0) -> ShardPlan:
    assignments = sorted(assignments, key=lambda a: (a.table_id, a.partition_index))
    plan = ShardPlan(strategy=strategy, model_id=spec.model_id, num_sparse_shards=k,
                     assignments=assignments, bin_limit_bytes=bin_limit,
                     requested_shards=requested or k)
    plan.rpc_ops = build_rpc_ops(spec, assignments)
    return plan


def build_rpc_ops(spec: ModelSpec, assignments) -> list[RpcOpDescriptor]:
    """One RPC operator per (net, shard) pair hosting at least one partition of that net."""
    groups: dict[tuple[int, int], list[tuple[int, int]]] = defaultdict(list)
    for a in assignments:
        groups[(spec.table(a.table_id).net_id, a.shard_id)].append((a.table_id, a.partition_index))
    ops = []
    net_order = {n.net_id: i for i, n in enumerate(spec.execution_order())}
    for op_id, (net_id, shard_id) in enumerate(sorted(groups, key=lambda g: (net_order[g[0]], g[1]))):
        ops.append(RpcOpDescriptor(op_id, net_id, shard_id, tuple(sorted(groups[(net_id, shard_id)]))))
    return ops


def plan_singular(spec: ModelSpec) -> ShardPlan:
    return _finish(spec, SINGULAR, 0, [])


def plan_one_shard(spec: ModelSpec) -> ShardPlan:
    return _finish(spec, ONE_SHARD, 1, [TablePartitionAssignment(t.table_id, 0, 1, 0) for t in spec.tables])


def _balanced(spec: ModelSpec, weight_of, k: int, strategy: str, shard_capacity_bytes=None) -> ShardPlan:
    if k < 1:
        raise ValueError("shard count must be >= 1")
    if shard_capacity_bytes is not None:
        for t in spec.tables:
            if t.size_bytes > shard_capacity_bytes:
                raise PartitionRequired(
                    f"table {t.table_id} ({t.size_bytes} B) exceeds the per-shard budget "
                    f"{shard_capacity_bytes} B; {strategy} never splits tables")
    order = sorted(spec.tables, key=lambda t: (-weight_of(t), -t.size_bytes, t.table_id))
    bins = lpt_assign([weight_of(t) for t in order], k)
    assignments = [TablePartitionAssignment(t.table_id, 0, 1, b) for t, b in zip(order, bins)]
    plan = _finish(spec, strategy, k, assignments)
    if shard_capacity_bytes is not None:
        over = [s for s, b in enumerate(plan.shard_bytes(spec)) if b > shard_capacity_bytes]
        if over:
            raise InfeasibleCapacity(f"shards {over} exceed the per-shard budget {shard_capacity_bytes} B")
    return plan


def plan_capacity_balanced(spec: ModelSpec, profiles=None, k: int = 2, shard_capacity_bytes=None) -> ShardPlan:
    return _balanced(spec, lambda t: t.size_bytes, k, CAPACITY_BALANCED, shard_capacity_bytes)


def plan_load_balanced(spec: ModelSpec, profiles=None, k: int = 2, shard_capacity_bytes=None) -> ShardPlan:
    pm = _profile_map(spec, profiles)
    if all(pm[t.table_id].est_pooling_factor == 0 for t in spec.tables):
        return _balanced(spec, lambda t: t.size_bytes, k, LOAD_BALANCED, shard_capacity_bytes)
    return _balanced(spec, lambda t: pm[t.table_id].est_pooling_factor, k, LOAD_BALANCED,
                     shard_capacity_bytes)


def _split_count(num_rows: int, dim: int, limit: int) -> int:
    row_bytes = dim * FLOAT_BYTES
    if row_bytes > limit:
        raise InfeasibleCapacity(f"a single row ({row_bytes} B) exceeds the bin limit {limit} B")
    max_rows = limit // row_bytes
    return math.ceil(num_rows / max_rows)


def _nsbp_pack(spec: ModelSpec, limit: int) -> list[TablePartitionAssignment]:
    assignments = []
    next_shard = 0
    for net in spec.execution_order():
        tables = sorted((spec.table(tid) for tid in net.table_ids),
                        key=lambda t: (-t.size_bytes, t.table_id))
        bins: list[tuple[int, int]] = []  # (shard_id, used bytes)
        for t in tables:
            if t.size_bytes > limit:
                if t.pooling == CONCAT:
                    raise InfeasibleCapacity(
                        f"concat table {t.table_id} ({t.size_bytes} B) exceeds the bin limit and cannot be split")
                parts = _split_count(t.num_rows, t.dim, limit)
                for p in range(parts):
                    assignments.append(TablePartitionAssignment(t.table_id, p, parts, next_shard))
                    next_shard += 1
                continue
            for i, (shard, used) in enumerate(bins):
                if used + t.size_bytes <= limit:
                    bins[i] = (shard, used + t.size_bytes)
                    assignments.append(TablePartitionAssignment(t.table_id, 0, 1, shard))
                    break
            else:
                bins.append((next_shard, t.size_bytes))
                assignments.append(TablePartitionAssignment(t.table_id, 0, 1, next_shard))
                next_shard += 1
    return assignments


def _shard_count(assignments) -> int:
    return 1 + max((a.shard_id for a in assignments), default=-1)


def plan_nsbp(spec: ModelSpec, profiles=None, k: int = 2, bin_limit_bytes: int | None = None) -> ShardPlan:
    """Net-specific bin packing.

    With an explicit ``bin_limit_bytes`` the resulting shard count follows from the
    packing and may differ from ``k``. Without one, the smallest limit whose packing
    uses at most ``k`` shards is chosen.
    """
    n_nets = len(spec.nets)
    if k < n_nets:
        raise InfeasibleCapacity(f"nsbp needs at least one shard per net ({n_nets}), got {k}")
    if bin_limit_bytes is not None:
        if bin_limit_bytes < 1:
            raise InfeasibleCapacity("bin limit must be positive")
        assignments = _nsbp_pack(spec, bin_limit_bytes)
        return _finish(spec, NSBP, _shard_count(assignments), assignments, bin_limit_bytes, k)

    row_floor = max(t.dim * FLOAT_BYTES for t in spec.tables)
    lo = max(row_floor, math.ceil(spec.sparse_bytes / k))
    hi = max(lo, max(sum(spec.table(t).size_bytes for t in n.table_ids) for n in spec.nets))
    best = _nsbp_pack(spec, hi)
    if _shard_count(best) > k:
        raise InfeasibleCapacity(f"cannot pack into {k} shards")
    best_limit = hi
    while lo < hi:
        mid = (lo + hi) // 2
        try:
            cand = _nsbp_pack(spec, mid)
        except InfeasibleCapacity:
            lo = mid + 1
            continue
        if _shard_count(cand) <= k:
            hi, best, best_limit = mid, cand, mid
        else:
            lo = mid + 1
    return _finish(spec, NSBP, _shard_count(best), best, best_limit, k)


def make_plan(spec: ModelSpec, strategy: str, k: int = 1, profiles=None,
              bin_limit_bytes: int | None = None) -> ShardPlan:
    if strategy == SINGULAR:
        return plan_singular(spec)
    if strategy == ONE_SHARD:
        return plan_one_shard(spec)
    if strategy == CAPACITY_BALANCED:
        return plan_capacity_balanced(spec, profiles, k)
    if strategy == LOAD_BALANCED:
        return plan_load_balanced(spec, profiles, k)
    if strategy == NSBP:
        return plan_nsbp(spec, profiles, k, bin_limit_bytes)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


# --------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, detail: str) -> None:
        self.violations.append(f"{kind}: {detail}")

    def kinds(self) -> set[str]:
        return {v.split(":", 1)[0] for v in self.violations}


def validate_plan(spec: ModelSpec, plan: ShardPlan) -> ValidationReport:
    rep = ValidationReport()
    if plan.model_id != spec.model_id:
        rep.add("model", f"plan is for {plan.model_id!r}, model is {spec.model_id!r}")
    if plan.strategy not in STRATEGIES:
        rep.add("strategy", f"unknown strategy {plan.strategy!r}")
    if plan.strategy == SINGULAR:
        if plan.assignments or plan.rpc_ops or plan.num_sparse_shards:
            rep.add("singular", "singular plan must have no shards, assignments or rpc ops")
        return rep

    by_table: dict[int, list[TablePartitionAssignment]] = defaultdict(list)
    table_ids = {t.table_id for t in spec.tables}
    for a in plan.assignments:
        if a.table_id not in table_ids:
            rep.add("coverage", f"assignment for unknown table {a.table_id}")
            continue
        by_table[a.table_id].append(a)
        if not 0 <= a.shard_id < plan.num_sparse_shards:
            rep.add("topology", f"table {a.table_id} placed on shard {a.shard_id} outside [0, {plan.num_sparse_shards})")
        if not 0 <= a.partition_index < a.partition_count:
            rep.add("modulus", f"table {a.table_id}: partition {a.partition_index} of {a.partition_count}")

    for t in spec.tables:
        parts = by_table.get(t.table_id, [])
        if not parts:
            rep.add("coverage", f"table {t.table_id} is not assigned")
            continue
        counts = {a.partition_count for a in parts}
        if len(counts) != 1:
            rep.add("modulus", f"table {t.table_id}: inconsistent partition counts {sorted(counts)}")
            continue
        count = counts.pop()
        idx = sorted(a.partition_index for a in parts)
        if len(idx) != len(set(idx)):
            rep.add("coverage", f"table {t.table_id}: partition assigned more than once")
        if set(idx) != set(range(count)):
            missing = sorted(set(range(count)) - set(idx))
            if missing:
                rep.add("coverage", f"table {t.table_id}: partitions {missing} unassigned")
        if count > t.num_rows:
            rep.add("modulus", f"table {t.table_id}: {count} partitions for {t.num_rows} rows")
        if count > 1 and t.pooling == CONCAT:
            rep.add("modulus", f"concat table {t.table_id} must not be split")

    expected_ops = build_rpc_ops(spec, [a for a in plan.assignments if a.table_id in table_ids])
    got = {(o.net_id, o.shard_id, o.partitions) for o in plan.rpc_ops}
    want = {(o.net_id, o.shard_id, o.partitions) for o in expected_ops}
    if got != want:
        rep.add("rpc", f"rpc op table disagrees with assignments (missing {len(want - got)}, extra {len(got - want)})")
    for o in plan.rpc_ops:
        if not 0 <= o.shard_id < plan.num_sparse_shards:
            # every edge must run main -> sparse shard; anything else is not servable
            rep.add("topology", f"rpc op {o.op_id} targets non-sparse endpoint {o.shard_id}")

    if plan.strategy == NSBP:
        nets_on: dict[int, set[int]] = defaultdict(set)
        for a in plan.assignments:
            if a.table_id in table_ids:
                nets_on[a.shard_id].add(spec.table(a.table_id).net_id)
        for shard, nets in sorted(nets_on.items()):
            if len(nets) > 1:
                rep.add("purity", f"shard {shard} mixes nets {sorted(nets)}")
        if plan.bin_limit_bytes:
            used_by: dict[int, int] = defaultdict(int)
            for a in plan.assignments:
                if a.table_id in table_ids and 0 <= a.partition_index < a.partition_count:
                    t = spec.table(a.table_id)
                    used_by[a.shard_id] += partition_bytes(t.num_rows, t.dim, a.partition_index, a.partition_count)
            for shard, used in sorted(used_by.items()):
                if used > plan.bin_limit_bytes:
                    rep.add("capacity", f"shard {shard} holds {used} B over limit {plan.bin_limit_bytes} B")
    return rep


# --------------------------------------------------------------------------
# plan file


PLAN_MAGIC = "recshard-plan"
PLAN_VERSION = 1


def _plan_body(plan: ShardPlan) -> str:
    lines = [
        f"{PLAN_MAGIC} {PLAN_VERSION}",
        f"model_id {plan.model_id}",
        f"strategy {plan.strategy}",
        f"num_sparse_shards {plan.num_sparse_shards}",
        f"requested_shards {plan.requested_shards}",
        f"bin_limit_bytes {plan.bin_limit_bytes}",
    ]
    for a in plan.assignments:
        lines.append(f"assign table={a.table_id} shard={a.shard_id} partition={a.partition_index} "
                     f"of={a.partition_count}")
    for o in plan.rpc_ops:
        parts = ",".join(f"{t}:{p}" for t, p in o.partitions)
        lines.append(f"rpcop id={o.op_id} net={o.net_id} shard={o.shard_id} parts={parts}")
    return "\n".join(lines) + "\n"


def format_plan(plan: ShardPlan) -> str:
    return _plan_body(plan) + f"plan_hash {plan.plan_hash}\n"


def save_plan(plan: ShardPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_plan(plan))


def parse_plan(text: str) -> ShardPlan:
    lines = text.splitlines()
    if not lines or lines[0].split() != [PLAN_MAGIC, str(PLAN_VERSION)]:
        raise ParseError(f"not a {PLAN_MAGIC} v{PLAN_VERSION} file", 1)
    meta: dict[str, str] = {}
    assignments, ops = [], []
    declared_hash = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        try:
            if kind in ("model_id", "strategy", "num_sparse_shards", "requested_shards", "bin_limit_bytes"):
                meta[kind] = rest
            elif kind == "assign":
                kv = dict(tok.split("=", 1) for tok in rest.split())
                assignments.append(TablePartitionAssignment(
                    int(kv["table"]), int(kv["partition"]), int(kv["of"]), int(kv["shard"])))
            elif kind == "rpcop":
                kv = dict(tok.split("=", 1) for tok in rest.split())
                parts = tuple(tuple(int(x) for x in p.split(":")) for p in kv["parts"].split(",") if p)
                ops.append(RpcOpDescriptor(int(kv["id"]), int(kv["net"]), int(kv["shard"]), parts))
            elif kind == "plan_hash":
                declared_hash = rest.strip()
            else:
                raise ParseError(f"unknown record {kind!r}", lineno)
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"bad {kind} record: {exc}", lineno) from None
    for key in ("model_id", "strategy", "num_sparse_shards", "bin_limit_bytes"):
        if key not in meta:
            raise ParseError("missing plan entry", None, key)
    plan = ShardPlan(strategy=meta["strategy"], model_id=meta["model_id"],
                     num_sparse_shards=int(meta["num_sparse_shards"]),
                     assignments=assignments, rpc_ops=ops,
                     bin_limit_bytes=int(meta["bin_limit_bytes"]),
                     requested_shards=int(meta.get("requested_shards", meta["num_sparse_shards"])))
    if declared_hash is not None and declared_hash != plan.plan_hash:
        raise ParseError(f"plan_hash mismatch: file says {declared_hash}, content hashes to {plan.plan_hash}",
                         None, "plan_hash")
    return plan


def load_plan(path) -> ShardPlan:
    with open(path, encoding="utf-8") as f:
        return parse_plan(f.read())


def route_partition(indices: np.ndarray, partition_count: int) -> tuple[np.ndarray, np.ndarray]:
    """(partition, local row) for each global row index."""
    return indices % partition_count, indices // partition_count
