"""Request execution on the main shard and embedding lookups on sparse shards.

The main shard splits a ranking request into batches of candidates and runs
each batch through the net chain. Dense layers run inline. Embedding lookups
either run locally (singular plan) or are routed to sparse shards by row
modulus, issued concurrently for one net, awaited, and merged in ascending
partition order before the dependent dense layers run.

Sum pooling accumulates in float64 everywhere (sparse shards ship float64
partials), and the merged vector is rounded to float32 once. Singular and
sharded execution therefore agree to within one float32 rounding step.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange, UnknownPartition, ValidationError
from .model import CANDIDATE, CONCAT, USER, EmbeddingTable, ModelSpec, Net, check_indices, fc_forward_batch, pool_segments, sigmoid
from .planner import ShardPlan
from .tracing import (
    DENSE_OP, MAIN_SHARD, NET_OVERHEAD, ROOT_NAME, RPC_SERDE, RPC_SERVICE, RPC_WAIT, SPARSE_OP,
    SPARSE_ROOT_NAME, Span, Tracer, new_id, now_ns,
)

SINGLE_BATCH = None
DEFAULT_RPC_DEADLINE = 1.0

_EMPTY_IDX = np.zeros(0, dtype=np.int64)


@dataclass
class SparseColumn:
    """Ragged per-item index lists stored as lengths + flattened indices."""

    lengths: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int32).reshape(-1)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if int(self.lengths.sum()) != self.indices.size or (self.lengths < 0).any():
            raise ValidationError(
                f"lengths sum {int(self.lengths.sum())} != {self.indices.size} flattened indices")

    @classmethod
    def from_lists(cls, lists) -> "SparseColumn":
        lists = [np.asarray(x, dtype=np.int64).reshape(-1) for x in lists]
        idx = np.concatenate(lists) if lists else _EMPTY_IDX
        return cls(np.array([len(x) for x in lists], dtype=np.int32), idx)

    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.lengths, dtype=np.int64)))

    def item(self, i: int) -> np.ndarray:
        off = self.offsets()
        return self.indices[off[i]:off[i + 1]]

    def slice(self, start: int, stop: int) -> "SparseColumn":
        off = self.offsets()
        return SparseColumn(self.lengths[start:stop], self.indices[off[start]:off[stop]])

    def __eq__(self, other):
        return (isinstance(other, SparseColumn) and np.array_equal(self.lengths, other.lengths)
                and np.array_equal(self.indices, other.indices))


@dataclass
class Candidate:
    dense: np.ndarray
    sparse: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass(eq=False)
class RankingRequest:
    """A user plus the candidate items to score, stored column-wise."""

    request_id: int
    user_dense: np.ndarray
    user_sparse: dict[int, np.ndarray]
    candidate_dense: np.ndarray
    candidate_sparse: dict[int, SparseColumn]

    def __post_init__(self):
        self.user_dense = np.asarray(self.user_dense, dtype=np.float32).reshape(-1)
        self.candidate_dense = np.asarray(self.candidate_dense, dtype=np.float32)
        if self.candidate_dense.ndim != 2:
            raise ValidationError("candidate_dense must be a (candidates x dim) matrix")
        self.user_sparse = {int(k): np.asarray(v, dtype=np.int64).reshape(-1) for k, v in self.user_sparse.items()}

    @classmethod
    def from_candidates(cls, request_id: int, user_dense, user_sparse, candidates: list[Candidate]) -> "RankingRequest":
        dense = np.stack([np.asarray(c.dense, dtype=np.float32) for c in candidates]) if candidates else np.zeros((0, 0), np.float32)
        tids = sorted({t for c in candidates for t in c.sparse})
        cols = {t: SparseColumn.from_lists([c.sparse.get(t, _EMPTY_IDX) for c in candidates]) for t in tids}
        return cls(request_id, user_dense, user_sparse, dense, cols)

    @property
    def n_candidates(self) -> int:
        return int(self.candidate_dense.shape[0])

    @property
    def candidates(self) -> list[Candidate]:
        return [Candidate(self.candidate_dense[i], {t: c.item(i) for t, c in self.candidate_sparse.items()})
                for i in range(self.n_candidates)]

    def total_lookups(self) -> int:
        return sum(v.size for v in self.user_sparse.values()) + sum(
            c.indices.size for c in self.candidate_sparse.values())

    def __eq__(self, other):
        if not isinstance(other, RankingRequest):
            return NotImplemented
        return (self.request_id == other.request_id
                and np.array_equal(self.user_dense, other.user_dense)
                and self.user_sparse.keys() == other.user_sparse.keys()
                and all(np.array_equal(v, other.user_sparse[k]) for k, v in self.user_sparse.items())
                and np.array_equal(self.candidate_dense, other.candidate_dense)
                and self.candidate_sparse == other.candidate_sparse)

    def validate(self, spec: ModelSpec) -> None:
        if self.n_candidates < 1:
            raise ValidationError(f"request {self.request_id}: needs at least one candidate")
        user, cand, scoring = spec.user_net, spec.candidate_net, spec.scoring_net
        if scoring is user:
            want_cand = user.dense_input_dim
        else:
            want_cand = cand.dense_input_dim
            if self.user_dense.shape[0] != user.dense_input_dim:
                raise DimensionMismatch(
                    f"request {self.request_id}: user_dense has {self.user_dense.shape[0]} values, "
                    f"net {user.net_id} expects {user.dense_input_dim}")
        if self.candidate_dense.shape[1] != want_cand:
            raise DimensionMismatch(
                f"request {self.request_id}: candidate dense width {self.candidate_dense.shape[1]} != {want_cand}")
        user_tables = set(user.table_ids)
        cand_tables = set(cand.table_ids) if cand else set()
        for tid in self.user_sparse:
            if tid not in user_tables:
                raise ValidationError(f"request {self.request_id}: user feature for table {tid} outside the user net")
        for tid, col in self.candidate_sparse.items():
            if tid not in cand_tables:
                raise ValidationError(f"request {self.request_id}: candidate feature for table {tid} outside the candidate net")
            if col.lengths.shape[0] != self.n_candidates:
                raise ValidationError(f"request {self.request_id}: table {tid} lengths cover {col.lengths.shape[0]} items")


@dataclass
class Batch:
    batch_index: int
    start: int
    stop: int
    dense: np.ndarray
    sparse: dict[int, SparseColumn]

    @property
    def size(self) -> int:
        return self.stop - self.start


def split_batches(request: RankingRequest, batch_size=SINGLE_BATCH) -> list[Batch]:
    """Cut the candidate list into consecutive batches; ``None``/``inf`` means one batch."""
    n = request.n_candidates
    if batch_size is None or (isinstance(batch_size, float) and math.isinf(batch_size)):
        batch_size = max(n, 1)
    batch_size = int(batch_size)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    out = []
    for b, start in enumerate(range(0, n, batch_size)):
        stop = min(n, start + batch_size)
        out.append(Batch(b, start, stop, request.candidate_dense[start:stop],
                         {t: c.slice(start, stop) for t, c in request.candidate_sparse.items()}))
    return out


def route_indices(table: EmbeddingTable, partition_count: int, indices, lengths=None):
    """Split global row ids by modulus.

    Returns one ``(lengths, local_indices)`` pair per partition; item order and
    within-item order are preserved.
    """
    if isinstance(partition_count, ShardPlan):
        partition_count = partition_count.partition_count(table.table_id)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    lens = np.array([idx.size], dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    check_indices(table, idx)
    if partition_count == 1:
        return [(lens.astype(np.int32), idx)]
    n = lens.shape[0]
    item = np.repeat(np.arange(n), lens)
    part = idx % partition_count
    local = idx // partition_count
    out = []
    for p in range(partition_count):
        mask = part == p
        out.append((np.bincount(item[mask], minlength=n).astype(np.int32), local[mask]))
    return out


# --------------------------------------------------------------------------
# sparse shard side


@dataclass
class LookupEntry:
    table_id: int
    partition_index: int
    lengths: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int32).reshape(-1)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)

    def __eq__(self, other):
        return (isinstance(other, LookupEntry)
                and (self.table_id, self.partition_index) == (other.table_id, other.partition_index)
                and np.array_equal(self.lengths, other.lengths) and np.array_equal(self.indices, other.indices))


@dataclass
class SparseLookupRequest:
    net_id: int
    batch_index: int
    entries: list[LookupEntry]
    plan_key: str = ""

    @property
    def num_indices(self) -> int:
        return sum(e.indices.size for e in self.entries)


@dataclass
class PooledResult:
    """Per-item pooled vectors of one table partition (float64 partial sums)."""

    table_id: int
    partition_index: int
    values: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, PooledResult)
                and (self.table_id, self.partition_index) == (other.table_id, other.partition_index)
                and np.array_equal(self.values, other.values))


class ShardTables:
    """Row partitions hosted by one sparse shard, keyed by (table_id, partition)."""

    def __init__(self, spec: ModelSpec, plan: ShardPlan, shard_id: int):
        self.shard_id = shard_id
        self.parts: dict[tuple[int, int], tuple[EmbeddingTable, int, np.ndarray]] = {}
        for a in plan.shard_assignments(shard_id):
            t = spec.table(a.table_id)
            if a.partition_count == 1:
                local = t.values
            else:
                local = np.ascontiguousarray(t.values[a.partition_index::a.partition_count])
            self.parts[(a.table_id, a.partition_index)] = (t, a.partition_count, local)

    def __contains__(self, key) -> bool:
        return key in self.parts

    def __len__(self) -> int:
        return len(self.parts)

    @property
    def nbytes(self) -> int:
        return sum(v.nbytes for _, _, v in self.parts.values())


def execute_sparse_shard(lookup: SparseLookupRequest, local: ShardTables, span: Span | None = None) -> list[PooledResult]:
    out = []
    for e in lookup.entries:
        key = (e.table_id, e.partition_index)
        if key not in local.parts:
            raise UnknownPartition(e.table_id, e.partition_index, local.shard_id)
        table, count, values = local.parts[key]
        if span is not None:
            span.phase(SPARSE_OP, f"sls:t{e.table_id}p{e.partition_index}")
        if e.indices.size:
            lo, hi = int(e.indices.min()), int(e.indices.max())
            for bad in (lo, hi):
                if bad < 0 or bad >= values.shape[0]:
                    raise IndexOutOfRange(table.table_id, bad * count + e.partition_index, table.num_rows)
        if int(e.lengths.sum()) != e.indices.size:
            raise ValidationError(f"table {e.table_id}: lengths do not match index count")
        pooled = pool_segments(values, e.indices, e.lengths, table.pooling, table.concat_k)
        out.append(PooledResult(e.table_id, e.partition_index, pooled))
    return out


# --------------------------------------------------------------------------
# transports


@dataclass
class RpcHandle:
    shard_id: int
    span_id: int
    payload: object = None
    send_ns: int = 0
    done_ns: int = 0
    response: object = None
    bytes_out: int = 0
    bytes_in: int = 0
    request_id: int = 0
    sock: object = None


class LocalTransport:
    """In-process stand-in for the socket transport (tests, notebooks).

    Calls run synchronously at issue time; sparse-side spans go to one
    tracer per shard so merged traces look like a real multi-shard run.
    """

    def __init__(self, spec: ModelSpec, plan: ShardPlan, tracers: dict[int, Tracer] | None = None,
                 delay_s: float = 0.0):
        self.tables = {s: ShardTables(spec, plan, s) for s in range(plan.num_sparse_shards)}
        self.tracers = tracers or {}
        self.delay_s = delay_s
        self.down: set[int] = set()

    def prepare(self, shard_id, lookup, trace_id, parent_span_id, request_id) -> RpcHandle:
        return RpcHandle(shard_id, parent_span_id, payload=(lookup, trace_id, request_id))

    def issue(self, h: RpcHandle, timeout: float) -> None:
        from .errors import RpcTimeout, ShardUnavailable
        if timeout <= 0:
            raise RpcTimeout(h.shard_id, timeout)
        if h.shard_id in self.down:
            raise ShardUnavailable(h.shard_id, "marked down")
        lookup, trace_id, request_id = h.payload
        h.send_ns = now_ns()
        if self.delay_s:
            time.sleep(self.delay_s)
        tracer = self.tracers.get(h.shard_id) or Tracer(h.shard_id, enabled=False)
        with tracer.span(RPC_SERVICE, SPARSE_ROOT_NAME, trace_id, h.span_id, request_id) as sp:
            sp.phase(RPC_SERVICE, "dispatch")
            h.response = execute_sparse_shard(lookup, self.tables[h.shard_id], sp)
        h.done_ns = now_ns()

    def wait(self, handles, timeout: float) -> None:
        return None

    def decode(self, h: RpcHandle) -> list[PooledResult]:
        return h.response

    def close(self):
        pass


# --------------------------------------------------------------------------
# main shard


def _broadcast(x: np.ndarray, n: int) -> np.ndarray:
    return np.broadcast_to(x, (n, x.shape[1])) if x.shape[0] == 1 and n != 1 else x


class Engine:
    """Executes ranking requests for one (model, plan) deployment on the main shard."""

    def __init__(self, spec: ModelSpec, plan: ShardPlan, transport=None, tracer: Tracer | None = None,
                 workers: int | None = None, rpc_deadline: float = DEFAULT_RPC_DEADLINE, plan_key: str = ""):
        if plan.model_id != spec.model_id:
            raise ValidationError(f"plan for {plan.model_id!r} cannot run model {spec.model_id!r}")
        if not plan.is_singular and transport is None:
            raise ValidationError("a sharded plan needs a transport")
        self.spec = spec
        self.plan = plan
        self.transport = transport
        self.tracer = tracer or Tracer(MAIN_SHARD, enabled=False)
        self.rpc_deadline = rpc_deadline
        self.plan_key = plan_key
        self.workers = workers or os.cpu_count() or 1
        self._pool = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="batch")
        self._order = spec.execution_order()
        self._layout: dict[int, list[tuple[int, int, int]]] = {}
        for tid in (t.table_id for t in spec.tables):
            if not plan.is_singular:
                self._layout[tid] = [(a.partition_index, a.partition_count, a.shard_id)
                                     for a in plan.partitions_of(tid)]

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ---------------------------------------------------------------------

    def execute_request(self, request: RankingRequest, batch_size=SINGLE_BATCH, root: Span | None = None,
                        trace_id: int | None = None) -> np.ndarray:
        """Score every candidate; returns float32 scores in candidate order."""
        if root is None:
            with self.tracer.span(RPC_SERVICE, ROOT_NAME, trace_id or new_id(128), 0, request.request_id) as r:
                return self.execute_request(request, batch_size, r)
        root.phase(NET_OVERHEAD, "split_batches")
        request.validate(self.spec)
        batches = split_batches(request, batch_size)
        container = root.phase(NET_OVERHEAD, "batches", args={"n_batches": len(batches)})
        submit = root.phase_start_ns
        if len(batches) == 1:
            results = [self._run_batch(request, batches[0], root.trace_id, container, submit)]
        else:
            futs = [self._pool.submit(self._run_batch, request, b, root.trace_id, container, submit)
                    for b in batches]
            results = [f.result() for f in futs]
        root.phase(NET_OVERHEAD, "gather_scores")
        return np.concatenate(results)

    def _run_batch(self, req: RankingRequest, batch: Batch, trace_id: int, parent: int, submit_ns: int) -> np.ndarray:
        with self.tracer.span(NET_OVERHEAD, f"batch[{batch.batch_index}]", trace_id, parent, req.request_id,
                              start_ns=submit_ns, args={"batch": batch.batch_index, "items": batch.size}) as bs:
            bs.phase(NET_OVERHEAD, "schedule", start_ns=submit_ns, count_cpu=False)
            user_vec = None
            out = None
            for net in self._order:
                out = self._run_net(net, req, batch, bs, user_vec)
                user_vec = out
            bs.phase(DENSE_OP, "sigmoid")
            scores = sigmoid(out[:, 0])
        return scores

    def _lookups(self, net: Net, req: RankingRequest, batch: Batch) -> dict[int, SparseColumn]:
        cols = {}
        for tid in net.table_ids:
            if net.role == USER:
                idx = req.user_sparse.get(tid, _EMPTY_IDX)
                cols[tid] = SparseColumn(np.array([idx.size], dtype=np.int32), idx)
            else:
                col = batch.sparse.get(tid)
                cols[tid] = col if col is not None else SparseColumn(np.zeros(batch.size, np.int32), _EMPTY_IDX)
        return cols

    def _run_net(self, net: Net, req: RankingRequest, batch: Batch, span: Span, user_vec) -> np.ndarray:
        spec = self.spec
        x = batch.dense if net is spec.scoring_net else req.user_dense[None, :]
        for lid in net.bottom_layers:
            span.phase(DENSE_OP, f"fc:{lid}")
            x = fc_forward_batch(spec.layer(lid), x)
        lookups = self._lookups(net, req, batch)
        if self.plan.is_singular:
            pooled = self._pool_local(net, lookups, span)
        else:
            pooled = self._pool_remote(net, lookups, req, batch, span)
        span.phase(DENSE_OP, f"concat:net{net.net_id}")
        n = x.shape[0]
        parts = [x] + [_broadcast(pooled[tid], n) for tid in net.table_ids]
        if net.role == CANDIDATE:
            parts.append(_broadcast(user_vec, n))
        x = np.concatenate(parts, axis=1)
        for lid in net.interaction_layers + net.top_layers:
            span.phase(DENSE_OP, f"fc:{lid}")
            x = fc_forward_batch(spec.layer(lid), x)
        return x

    def _pool_local(self, net: Net, lookups, span: Span) -> dict[int, np.ndarray]:
        pooled = {}
        for tid in net.table_ids:
            span.phase(SPARSE_OP, f"sls:t{tid}")
            t = self.spec.table(tid)
            col = lookups[tid]
            check_indices(t, col.indices)
            pooled[tid] = pool_segments(t.values, col.indices, col.lengths, t.pooling, t.concat_k).astype(np.float32)
        return pooled

    def route(self, net: Net, lookups) -> dict[int, list[LookupEntry]]:
        """Group per-partition lookups by destination shard, skipping empty partitions."""
        per_shard: dict[int, list[LookupEntry]] = {}
        for tid in net.table_ids:
            t = self.spec.table(tid)
            col = lookups[tid]
            layout = self._layout[tid]
            routed = route_indices(t, layout[0][1], col.indices, col.lengths)
            for (p, _, shard), (lens, local) in zip(layout, routed):
                if local.size:
                    per_shard.setdefault(shard, []).append(LookupEntry(tid, p, lens, local))
        return per_shard

    def _pool_remote(self, net: Net, lookups, req: RankingRequest, batch: Batch, span: Span) -> dict[int, np.ndarray]:
        span.phase(NET_OVERHEAD, f"route:net{net.net_id}")
        per_shard = self.route(net, lookups)
        span.phase(RPC_SERDE, f"encode_lookup:net{net.net_id}")
        handles = []
        for shard in sorted(per_shard):
            lk = SparseLookupRequest(net.net_id, batch.batch_index, per_shard[shard], self.plan_key)
            handles.append(self.transport.prepare(shard, lk, span.trace_id, new_id(), req.request_id))
        envelope = span.phase(RPC_WAIT, f"rpc_wait:net{net.net_id}", args={"net": net.net_id, "rpcs": len(handles)})
        try:
            for h in handles:
                self.transport.issue(h, self.rpc_deadline)
            self.transport.wait(handles, self.rpc_deadline)
        finally:
            t_fail = now_ns()
            for h in handles:
                if not h.send_ns:
                    continue
                args = {"async": 1, "dst_shard": h.shard_id, "net": net.net_id, "batch": batch.batch_index,
                        "bytes_out": h.bytes_out, "bytes_in": h.bytes_in}
                if not h.done_ns:
                    # abandoned call: keep the span so the remote side still links up
                    args["failed"] = 1
                span.annotate(RPC_WAIT, f"rpc:shard{h.shard_id}", h.send_ns, (h.done_ns or t_fail) - h.send_ns,
                              span_id=h.span_id, parent_id=envelope, args=args)
        span.phase(RPC_SERDE, f"decode_lookup:net{net.net_id}")
        partials: dict[int, list[PooledResult]] = {}
        for h in handles:
            for r in self.transport.decode(h):
                partials.setdefault(r.table_id, []).append(r)
        span.phase(SPARSE_OP, f"merge:net{net.net_id}")
        pooled = {}
        for tid in net.table_ids:
            t = self.spec.table(tid)
            n_items = lookups[tid].lengths.shape[0]
            got = sorted(partials.get(tid, []), key=lambda r: r.partition_index)
            if not got:
                pooled[tid] = np.zeros((n_items, t.pooled_width), dtype=np.float32)
                continue
            acc = got[0].values
            if len(got) > 1:
                acc = acc.copy()
                for r in got[1:]:
                    acc += r.values
            if acc.shape != (n_items, t.pooled_width):
                raise DimensionMismatch(f"table {tid}: partial shape {acc.shape} != ({n_items}, {t.pooled_width})")
            pooled[tid] = acc.astype(np.float32)
        return pooled


def expected_rpc_count(spec: ModelSpec, plan: ShardPlan, request: RankingRequest, batch_size=SINGLE_BATCH) -> int:
    """Exact RPC count for ``request``: shards receiving at least one lookup, per net per batch."""
    if plan.is_singular:
        return 0
    layout = {t.table_id: plan.partitions_of(t.table_id) for t in spec.tables}
    total = 0
    for batch in split_batches(request, batch_size):
        for net in spec.execution_order():
            shards = set()
            for tid in net.table_ids:
                if net.role == USER:
                    idx = request.user_sparse.get(tid, _EMPTY_IDX)
                else:
                    col = batch.sparse.get(tid)
                    idx = col.indices if col is not None else _EMPTY_IDX
                count = layout[tid][0].partition_count
                hit = set(np.unique(idx % count).tolist()) if idx.size else set()
                shards.update(a.shard_id for a in layout[tid] if a.partition_index in hit)
            total += len(shards)
    return total
