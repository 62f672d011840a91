"""Cross-layer span capture, per-shard trace files, merging and viewer export.

Every shard process owns one :class:`Tracer`. Spans are appended to a
per-thread deque (only the owning thread appends, only the flusher thread
pops), so the request path never takes a lock. A background thread drains
the deques into a newline-delimited trace file.

Within one span, :meth:`Span.phase` starts a child that begins exactly where
the previous child ended, so consecutive phases tile the parent with no
gaps. That is what lets the analyzer check that leaf spans account for the
whole end-to-end time.

Timestamps come from the monotonic clock anchored to the host wall clock at
import; they are comparable within one host only. Cross-host spans are
linked by ``parent_span_id`` and never by timestamp.
"""

from __future__ import annotations

import json
import os
import random
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field

from .errors import CorruptRecord

RPC_SERDE = "rpc_serde"
RPC_SERVICE = "rpc_service"
NET_OVERHEAD = "net_overhead"
DENSE_OP = "dense_op"
SPARSE_OP = "sparse_op"
RPC_WAIT = "rpc_wait"
LAYERS = (RPC_SERDE, RPC_SERVICE, NET_OVERHEAD, DENSE_OP, SPARSE_OP, RPC_WAIT)

MAIN_SHARD = -1
ROOT_NAME = "e2e"
SPARSE_ROOT_NAME = "sparse_e2e"

TRACE_FORMAT = "recshard-trace"
TRACE_VERSION = 1
DEFAULT_CAPACITY = 1 << 20

_WALL0 = time.time_ns()
_MONO0 = time.perf_counter_ns()
_rand = random.Random(int.from_bytes(os.urandom(8), "little") ^ os.getpid())


def now_ns() -> int:
    """Host wall-clock nanoseconds derived from the monotonic clock."""
    return _WALL0 + (time.perf_counter_ns() - _MONO0)


def new_id(bits: int = 64) -> int:
    while True:
        v = _rand.getrandbits(bits)
        if v:
            return v


@dataclass
class TraceEvent:
    trace_id: int
    span_id: int
    parent_span_id: int
    shard_id: int
    request_id: int
    layer: str
    name: str
    start_ns: int
    dur_ns: int
    cpu_ns: int = 0
    args: dict | None = None

    @property
    def end_ns(self) -> int:
        return self.start_ns + self.dur_ns

    @property
    def is_async(self) -> bool:
        """Per-RPC outstanding spans overlap each other inside an rpc_wait envelope."""
        return bool(self.args and self.args.get("async"))

    def to_record(self) -> dict:
        rec = {
            "trace_id": f"{self.trace_id:032x}",
            "span_id": f"{self.span_id:016x}",
            "parent_span_id": f"{self.parent_span_id:016x}",
            "shard_id": self.shard_id,
            "request_id": self.request_id,
            "layer": self.layer,
            "name": self.name,
            "start_ns": self.start_ns,
            "dur_ns": self.dur_ns,
            "cpu_ns": self.cpu_ns,
        }
        if self.args:
            rec["args"] = self.args
        return rec

    def to_line(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict) -> "TraceEvent":
        try:
            ev = cls(
                trace_id=int(rec["trace_id"], 16),
                span_id=int(rec["span_id"], 16),
                parent_span_id=int(rec["parent_span_id"], 16),
                shard_id=int(rec["shard_id"]),
                request_id=int(rec["request_id"]),
                layer=str(rec["layer"]),
                name=str(rec["name"]),
                start_ns=int(rec["start_ns"]),
                dur_ns=int(rec["dur_ns"]),
                cpu_ns=int(rec["cpu_ns"]),
                args=rec.get("args"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptRecord(f"bad trace record: {exc}") from None
        if ev.layer not in LAYERS or ev.dur_ns < 0:
            raise CorruptRecord(f"bad trace record: layer={ev.layer!r} dur={ev.dur_ns}")
        return ev

    @classmethod
    def from_line(cls, line: str) -> "TraceEvent":
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"unparseable trace line: {exc}") from None
        if not isinstance(rec, dict):
            raise CorruptRecord("trace line is not an object")
        return cls.from_record(rec)


class _Buffer:
    __slots__ = ("events", "dropped")

    def __init__(self):
        self.events: deque = deque()
        self.dropped = 0


class Tracer:
    """Per-process span recorder with an asynchronous file flusher.

    With ``path=None`` events stay in memory and are returned by :meth:`drain`.
    """

    def __init__(self, shard_id: int = MAIN_SHARD, path=None, enabled: bool = True,
                 capacity: int = DEFAULT_CAPACITY, flush_interval: float = 0.05, meta: dict | None = None):
        self.shard_id = shard_id
        self.enabled = enabled
        self.capacity = capacity
        self.path = path if enabled else None
        self._local = threading.local()
        self._buffers: list[_Buffer] = []
        self._collected: list[TraceEvent] = []
        self._written = 0
        self._file = None
        self._stop = threading.Event()
        self._drain_lock = threading.Lock()  # drainer side only; recording never takes it
        self._thread = None
        if self.path is not None:
            self._file = open(self.path, "w", encoding="utf-8")
            header = {"format": TRACE_FORMAT, "version": TRACE_VERSION, "shard_id": shard_id}
            header.update(meta or {})
            self._file.write(json.dumps(header, sort_keys=True) + "\n")
            self._thread = threading.Thread(target=self._flush_loop, args=(flush_interval,),
                                            name=f"trace-flush-{shard_id}", daemon=True)
            self._thread.start()

    # -- recording ---------------------------------------------------------

    def _buffer(self) -> _Buffer:
        buf = getattr(self._local, "buf", None)
        if buf is None:
            buf = self._local.buf = _Buffer()
            self._buffers.append(buf)
        return buf

    def record(self, event: TraceEvent) -> None:
        if not self.enabled:
            return
        buf = self._buffer()
        if len(buf.events) >= self.capacity:
            buf.dropped += 1
            return
        buf.events.append(event)

    @property
    def dropped(self) -> int:
        return sum(b.dropped for b in list(self._buffers))

    def span(self, layer: str, name: str, trace_id: int, parent_id: int = 0, request_id: int = 0,
             start_ns: int | None = None, args: dict | None = None) -> "Span":
        return Span(self, layer, name, trace_id, parent_id, request_id, start_ns, args)

    # -- draining ----------------------------------------------------------

    def _drain_buffers(self) -> list[TraceEvent]:
        out = []
        for buf in list(self._buffers):
            q = buf.events
            while q:
                out.append(q.popleft())
        return out

    def _flush_loop(self, interval: float) -> None:
        while not self._stop.wait(interval):
            self.flush()

    def _write(self, events: list[TraceEvent]) -> None:
        if not events or self._file is None:
            return
        self._file.write("".join(ev.to_line() + "\n" for ev in events))
        self._file.flush()
        self._written += len(events)

    def drain(self) -> list[TraceEvent]:
        """In-memory mode: return and clear everything recorded so far."""
        events = self._collected + self._drain_buffers()
        self._collected = []
        return events

    def flush(self) -> None:
        with self._drain_lock:
            if self._file is not None:
                self._write(self._drain_buffers())

    def close(self) -> None:
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None
        with self._drain_lock:
            if self._file is not None:
                self._write(self._drain_buffers())
                self._file.close()
                self._file = None

    @property
    def written(self) -> int:
        return self._written


class Span:
    """Completion guard for one timed span; use as a context manager."""

    __slots__ = ("tracer", "layer", "name", "trace_id", "span_id", "parent_id", "request_id",
                 "start_ns", "cpu0", "args", "_phase", "_cursor", "_done")

    def __init__(self, tracer: Tracer, layer, name, trace_id, parent_id, request_id, start_ns=None, args=None):
        self.tracer = tracer
        self.layer = layer
        self.name = name
        self.trace_id = trace_id
        self.parent_id = parent_id
        self.request_id = request_id
        self.span_id = new_id()
        self.args = args
        self.start_ns = now_ns() if start_ns is None else start_ns
        self.cpu0 = time.thread_time_ns()
        self._phase = None
        self._cursor = (self.start_ns, self.cpu0)  # the first phase starts where the span does
        self._done = False

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.end()
        return False

    def _emit(self, layer, name, span_id, parent_id, start, end, cpu, args):
        dur = max(0, end - start)
        self.tracer.record(TraceEvent(self.trace_id, span_id, parent_id, self.tracer.shard_id,
                                      self.request_id, layer, name, start, dur, min(max(cpu, 0), dur), args))

    def _close_phase(self, t: int, c: int) -> None:
        ph = self._phase
        if ph is not None:
            layer, name, sid, start, cpu0, args = ph
            self._emit(layer, name, sid, self.span_id, start, t, 0 if cpu0 is None else c - cpu0, args)
            self._phase = None

    def phase(self, layer: str, name: str, args: dict | None = None, start_ns: int | None = None,
              count_cpu: bool = True) -> int:
        """End the running phase (if any) and start a new one at the same instant.

        Returns the new phase's span id.
        """
        c = time.thread_time_ns()
        t = now_ns()
        self._close_phase(t, c)
        if self._cursor is not None:
            t, c = self._cursor
            self._cursor = None
        sid = new_id()
        self._phase = (layer, name, sid, t if start_ns is None else start_ns, c if count_cpu else None, args)
        return sid

    @property
    def phase_start_ns(self) -> int | None:
        return None if self._phase is None else self._phase[3]

    def end_phase(self) -> None:
        c = time.thread_time_ns()
        self._close_phase(now_ns(), c)
        self._cursor = None

    def child(self, layer: str, name: str, start_ns: int | None = None, args: dict | None = None) -> "Span":
        return Span(self.tracer, layer, name, self.trace_id, self.span_id, self.request_id, start_ns, args)

    def annotate(self, layer: str, name: str, start_ns: int, dur_ns: int, span_id: int | None = None,
                 parent_id: int | None = None, args: dict | None = None) -> int:
        """Record an already-finished span (e.g. an RPC measured by another party)."""
        sid = span_id or new_id()
        self.tracer.record(TraceEvent(self.trace_id, sid, parent_id or self.span_id, self.tracer.shard_id,
                                      self.request_id, layer, name, start_ns, max(0, dur_ns), 0, args))
        return sid

    def end(self) -> None:
        if self._done:
            return
        self._done = True
        c = time.thread_time_ns()
        t = now_ns()
        self._close_phase(t, c)
        self._emit(self.layer, self.name, self.span_id, self.parent_id, self.start_ns, t, c - self.cpu0, self.args)


# --------------------------------------------------------------------------
# reading and merging


@dataclass
class TraceFile:
    header: dict
    events: list[TraceEvent]
    corrupt: int = 0


def read_trace_file(path) -> TraceFile:
    events: list[TraceEvent] = []
    corrupt = 0
    header: dict = {}
    with open(path, encoding="utf-8", errors="replace") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            if i == 0:
                try:
                    header = json.loads(line)
                except json.JSONDecodeError:
                    header = {}
                if header.get("format") == TRACE_FORMAT:
                    continue
                header = {}
            try:
                events.append(TraceEvent.from_line(line))
            except CorruptRecord:
                corrupt += 1
    return TraceFile(header, events, corrupt)


@dataclass
class RequestTrace:
    trace_id: int
    request_id: int
    root: TraceEvent
    events: list[TraceEvent]
    _by_id: dict = field(default=None, repr=False)
    _children: dict = field(default=None, repr=False)

    def __post_init__(self):
        self._by_id = {e.span_id: e for e in self.events}
        ch = defaultdict(list)
        for e in self.events:
            if e.parent_span_id:
                ch[e.parent_span_id].append(e)
        for v in ch.values():
            v.sort(key=lambda e: (e.start_ns, e.span_id))
        self._children = ch

    def span(self, span_id: int) -> TraceEvent:
        return self._by_id[span_id]

    def children(self, span: TraceEvent) -> list[TraceEvent]:
        return self._children.get(span.span_id, [])

    def shards(self) -> list[int]:
        return sorted({e.shard_id for e in self.events})

    def by_shard(self) -> dict[int, list[TraceEvent]]:
        out = defaultdict(list)
        for e in self.events:
            out[e.shard_id].append(e)
        return dict(out)

    def rpc_spans(self) -> list[TraceEvent]:
        return [e for e in self.events if e.shard_id == MAIN_SHARD and e.is_async]

    @property
    def e2e_ns(self) -> int:
        return self.root.dur_ns


@dataclass
class MergedTraces:
    traces: list[RequestTrace]
    orphans: list[TraceEvent]
    corrupt: int = 0
    multi_root: list[int] = field(default_factory=list)

    def by_request(self) -> dict[int, RequestTrace]:
        return {t.request_id: t for t in self.traces}

    def by_trace_id(self) -> dict[int, RequestTrace]:
        return {t.trace_id: t for t in self.traces}


def merge_traces(paths) -> MergedTraces:
    """Group events from per-shard files by trace id and link them by parent id."""
    events: list[TraceEvent] = []
    corrupt = 0
    for p in paths:
        tf = read_trace_file(p)
        events.extend(tf.events)
        corrupt += tf.corrupt
    return merge_events(events, corrupt)


def merge_events(events, corrupt: int = 0) -> MergedTraces:
    groups: dict[int, list[TraceEvent]] = defaultdict(list)
    for e in events:
        groups[e.trace_id].append(e)
    traces, orphans, multi = [], [], []
    for tid in sorted(groups):
        evs = sorted(groups[tid], key=lambda e: (e.shard_id, e.start_ns, e.span_id))
        ids = {e.span_id for e in evs}
        roots = [e for e in evs if e.parent_span_id == 0 and e.shard_id == MAIN_SHARD]
        linked = []
        for e in evs:
            if e.parent_span_id == 0:
                if e.shard_id != MAIN_SHARD:
                    orphans.append(e)
                    continue
            elif e.parent_span_id not in ids:
                orphans.append(e)
                continue
            linked.append(e)
        if len(roots) != 1:
            if len(roots) > 1:
                multi.append(tid)
            if not roots:
                orphans.extend(linked)
            continue
        # spans whose ancestry does not reach the root are orphans too
        by_id = {e.span_id: e for e in linked}
        reach = []
        for e in linked:
            cur, seen = e, 0
            while cur.parent_span_id and cur.parent_span_id in by_id and seen < 10_000:
                cur = by_id[cur.parent_span_id]
                seen += 1
            (reach if cur is roots[0] else orphans).append(e)
        traces.append(RequestTrace(tid, roots[0].request_id, roots[0], reach))
    traces.sort(key=lambda t: (t.request_id, t.trace_id))
    orphans.sort(key=lambda e: (e.trace_id, e.shard_id, e.start_ns, e.span_id))
    return MergedTraces(traces, orphans, corrupt, multi)


# --------------------------------------------------------------------------
# viewer export


def _lane(shard_id: int) -> int:
    return 0 if shard_id == MAIN_SHARD else shard_id + 1


def export_trace(trace: RequestTrace, path=None) -> dict:
    """Render one request as trace-event JSON, one process lane per shard.

    Sparse-shard spans are placed relative to the main-shard root: the remote
    root is centred inside its parent RPC span (half the estimated network
    time on each side), and its descendants keep their offsets from it.
    """
    root = trace.root
    offsets: dict[int, float] = {}  # span_id -> start offset (ns) from root start

    def place(e: TraceEvent) -> float:
        if e.span_id in offsets:
            return offsets[e.span_id]
        if e.shard_id == MAIN_SHARD:
            off = float(e.start_ns - root.start_ns)
        else:
            anchor = e
            while anchor.parent_span_id in trace._by_id and trace.span(anchor.parent_span_id).shard_id == e.shard_id:
                anchor = trace.span(anchor.parent_span_id)
            parent = trace._by_id.get(anchor.parent_span_id)
            if parent is None:
                off = 0.0
            else:
                slack = max(0, parent.dur_ns - anchor.dur_ns)
                off = place(parent) + slack / 2.0 + (e.start_ns - anchor.start_ns)
        offsets[e.span_id] = off
        return off

    out = []
    for sid in trace.shards():
        label = "main shard" if sid == MAIN_SHARD else f"sparse shard {sid}"
        out.append({"name": "process_name", "ph": "M", "pid": _lane(sid), "tid": 0, "args": {"name": label}})
        out.append({"name": "process_sort_index", "ph": "M", "pid": _lane(sid), "tid": 0,
                    "args": {"sort_index": _lane(sid)}})
    for e in sorted(trace.events, key=lambda e: (_lane(e.shard_id), e.start_ns, e.span_id)):
        ev = {
            "name": e.name, "cat": e.layer, "ph": "X", "pid": _lane(e.shard_id),
            "tid": 1 if e.is_async else 0,
            "ts": place(e) / 1000.0, "dur": e.dur_ns / 1000.0,
            "args": {"span_id": f"{e.span_id:016x}", "parent_span_id": f"{e.parent_span_id:016x}",
                     "cpu_ns": e.cpu_ns, "dur_ns": e.dur_ns, **(e.args or {})},
        }
        out.append(ev)
    doc = {"traceEvents": out, "displayTimeUnit": "ns",
           "otherData": {"trace_id": f"{trace.trace_id:032x}", "request_id": trace.request_id}}
    if path is not None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f)
    return doc
