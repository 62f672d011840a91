"""TCP services for the main and sparse shards, plus their clients.

One frame is one message; each connection carries one request at a time and
responses come back in order. Clients keep a small pool of connections per
endpoint and check one out per call, so concurrent batches never share a
socket.

A server can host several deployments at once (model + plan pairs), keyed by
the plan hash carried in each request.
"""

from __future__ import annotations

import logging
import selectors
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, RecShardError, RpcTimeout, ShardUnavailable, ValidationError
from .model import ModelSpec
from .planner import ShardPlan
from .runtime import (
    SINGLE_BATCH, Engine, RankingRequest, RpcHandle, ShardTables, SparseLookupRequest, execute_sparse_shard,
)
from .tracing import (
    MAIN_SHARD, ROOT_NAME, RPC_SERDE, RPC_SERVICE, SPARSE_ROOT_NAME, Tracer, new_id, now_ns,
)
from . import wire

log = logging.getLogger(__name__)

TOPOLOGY_MAGIC = "recshard-topology"
TOPOLOGY_VERSION = 1
IDLE_POLL_S = 0.2


# --------------------------------------------------------------------------
# topology


def _endpoint(text: str, lineno: int) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ParseError(f"expected host:port, got {text!r}", lineno)
    try:
        return host, int(port)
    except ValueError:
        raise ParseError(f"bad port {port!r}", lineno, "port") from None


@dataclass
class Topology:
    main: tuple[str, int]
    shards: dict[int, tuple[str, int]] = field(default_factory=dict)
    rpc_delay_ms: float = 0.0

    def __post_init__(self):
        if sorted(self.shards) != list(range(len(self.shards))):
            raise ValidationError(f"shard ids must be 0..k-1, got {sorted(self.shards)}")
        if self.rpc_delay_ms < 0:
            raise ValidationError("rpc_delay_ms must be >= 0")

    @property
    def num_shards(self) -> int:
        return len(self.shards)

    def to_text(self) -> str:
        lines = [f"{TOPOLOGY_MAGIC} {TOPOLOGY_VERSION}", f"rpc_delay_ms {self.rpc_delay_ms:g}",
                 f"main {self.main[0]}:{self.main[1]}"]
        lines += [f"shard {s} {h}:{p}" for s, (h, p) in sorted(self.shards.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "Topology":
        main = None
        shards = {}
        delay = 0.0
        seen_magic = False
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if not seen_magic:
                if parts != [TOPOLOGY_MAGIC, str(TOPOLOGY_VERSION)]:
                    raise ParseError(f"expected '{TOPOLOGY_MAGIC} {TOPOLOGY_VERSION}'", lineno)
                seen_magic = True
            elif parts[0] == "rpc_delay_ms" and len(parts) == 2:
                try:
                    delay = float(parts[1])
                except ValueError:
                    raise ParseError("not a number", lineno, "rpc_delay_ms") from None
            elif parts[0] == "main" and len(parts) == 2:
                main = _endpoint(parts[1], lineno)
            elif parts[0] == "shard" and len(parts) == 3:
                try:
                    sid = int(parts[1])
                except ValueError:
                    raise ParseError("bad shard id", lineno, "shard") from None
                if sid in shards:
                    raise ParseError(f"duplicate shard {sid}", lineno, "shard")
                shards[sid] = _endpoint(parts[2], lineno)
            else:
                raise ParseError(f"unrecognised line {line!r}", lineno)
        if main is None:
            raise ParseError("missing main endpoint", None, "main")
        return cls(main, shards, delay)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Topology":
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read())


# --------------------------------------------------------------------------
# client side


class ConnectionPool:
    """Idle sockets to one endpoint; a socket is owned by one caller at a time."""

    def __init__(self, endpoint: tuple[str, int], shard_id: int, connect_timeout: float = 2.0):
        self.endpoint = endpoint
        self.shard_id = shard_id
        self.connect_timeout = connect_timeout
        self._idle: list[socket.socket] = []
        self._lock = threading.Lock()
        self.opened = 0

    def get(self) -> socket.socket:
        with self._lock:
            if self._idle:
                return self._idle.pop()
        try:
            sock = socket.create_connection(self.endpoint, timeout=self.connect_timeout)
        except OSError as exc:
            raise ShardUnavailable(self.shard_id, f"connect {self.endpoint[0]}:{self.endpoint[1]}: {exc}") from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        self.opened += 1
        return sock

    def put(self, sock: socket.socket) -> None:
        with self._lock:
            self._idle.append(sock)

    @staticmethod
    def discard(sock: socket.socket) -> None:
        try:
            sock.close()
        except OSError:
            pass

    def close(self) -> None:
        with self._lock:
            idle, self._idle = self._idle, []
        for s in idle:
            self.discard(s)


class SparseClient:
    """Transport used by the main shard's engine to reach sparse shards."""

    def __init__(self, topology: Topology, connect_timeout: float = 2.0):
        self.pools = {s: ConnectionPool(ep, s, connect_timeout) for s, ep in topology.shards.items()}

    def prepare(self, shard_id: int, lookup: SparseLookupRequest, trace_id: int, parent_span_id: int,
                request_id: int) -> RpcHandle:
        if shard_id not in self.pools:
            raise ShardUnavailable(shard_id, "not in topology")
        frame = wire.encode_frame(wire.Frame(wire.LOOKUP_REQ, trace_id, parent_span_id, request_id,
                                             wire.encode_lookup_request(lookup)))
        return RpcHandle(shard_id, parent_span_id, payload=frame, bytes_out=len(frame), request_id=request_id)

    def issue(self, h: RpcHandle, timeout: float) -> None:
        """Send without waiting for the reply."""
        if timeout <= 0:
            raise RpcTimeout(h.shard_id, timeout)
        pool = self.pools[h.shard_id]
        sock = pool.get()
        h.send_ns = now_ns()
        try:
            sock.settimeout(timeout)
            sock.sendall(h.payload)
        except socket.timeout:
            pool.discard(sock)
            raise RpcTimeout(h.shard_id, timeout) from None
        except OSError as exc:
            pool.discard(sock)
            raise ShardUnavailable(h.shard_id, f"send: {exc}") from None
        h.sock = sock

    def wait(self, handles: list[RpcHandle], timeout: float) -> None:
        """Block until every issued handle has a full response frame."""
        sel = selectors.DefaultSelector()
        pending = {}
        try:
            for h in handles:
                if h.sock is None or h.response is not None:
                    continue
                h.sock.setblocking(False)
                sel.register(h.sock, selectors.EVENT_READ, h)
                pending[h.sock] = (h, wire.FrameAssembler())
            while pending:
                deadline = min(h.send_ns for h, _ in pending.values()) + int(timeout * 1e9)
                left = (deadline - now_ns()) / 1e9
                if left <= 0:
                    h = min((h for h, _ in pending.values()), key=lambda h: h.send_ns)
                    raise RpcTimeout(h.shard_id, timeout)
                for key, _ in sel.select(left):
                    h, asm = pending[key.fileobj]
                    try:
                        data = key.fileobj.recv(1 << 16)
                    except BlockingIOError:
                        continue
                    except OSError as exc:
                        raise ShardUnavailable(h.shard_id, f"recv: {exc}") from None
                    if not data:
                        raise ShardUnavailable(h.shard_id, "connection closed")
                    frame = asm.feed(data)
                    if frame is None:
                        continue
                    h.done_ns = now_ns()
                    h.response = frame
                    h.bytes_in = len(frame.payload) + wire.HEADER_BYTES
                    sel.unregister(key.fileobj)
                    del pending[key.fileobj]
                    key.fileobj.setblocking(True)
                    self.pools[h.shard_id].put(key.fileobj)
                    h.sock = None
        finally:
            # anything still outstanding has an unknown amount of data in flight
            for sock, (h, _) in pending.items():
                ConnectionPool.discard(sock)
                h.sock = None
            for h in handles:
                if h.sock is not None and h.response is None:
                    ConnectionPool.discard(h.sock)
                    h.sock = None
            sel.close()

    def decode(self, h: RpcHandle):
        frame = h.response
        if frame.msg_type == wire.ERROR:
            raise wire.error_from_payload(frame.payload)
        if frame.msg_type != wire.LOOKUP_RESP or frame.request_id != h.request_id:
            raise ShardUnavailable(h.shard_id, f"unexpected reply type {frame.msg_type} for request {frame.request_id}")
        return wire.decode_lookup_response(frame.payload)

    def close(self) -> None:
        for p in self.pools.values():
            p.close()


@dataclass
class RankResult:
    scores: np.ndarray
    trace_id: int
    server_e2e_ns: int


class MainClient:
    """Blocking client for the main shard; thread-safe (one socket per in-flight call)."""

    def __init__(self, endpoint: tuple[str, int], connect_timeout: float = 2.0, timeout: float = 60.0):
        self.pool = ConnectionPool(endpoint, MAIN_SHARD, connect_timeout)
        self.timeout = timeout

    def rank(self, request: RankingRequest, plan_key: str = "", batch_size=wire.BATCH_DEFAULT,
             trace_id: int | None = None) -> RankResult:
        trace_id = trace_id or new_id(128)
        frame = wire.encode_frame(wire.Frame(wire.RANKING_REQ, trace_id, 0, request.request_id,
                                             wire.encode_ranking_request(request, plan_key, batch_size)))
        sock = self.pool.get()
        try:
            sock.settimeout(self.timeout)
            sock.sendall(frame)
            reply = wire.read_frame(sock)
        except socket.timeout:
            self.pool.discard(sock)
            raise RpcTimeout(MAIN_SHARD, self.timeout) from None
        except (OSError, EOFError) as exc:
            self.pool.discard(sock)
            raise ShardUnavailable(MAIN_SHARD, str(exc) or type(exc).__name__) from None
        except RecShardError:
            self.pool.discard(sock)
            raise
        self.pool.put(sock)
        if reply.request_id != request.request_id:
            raise ShardUnavailable(MAIN_SHARD, f"reply for request {reply.request_id}, sent {request.request_id}")
        if reply.msg_type == wire.ERROR:
            raise wire.error_from_payload(reply.payload)
        scores, e2e = wire.decode_ranking_response(reply.payload)
        return RankResult(scores, reply.trace_id, e2e)

    def close(self) -> None:
        self.pool.close()


# --------------------------------------------------------------------------
# server side


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, address, handler, service):
        self.service = service
        self.draining = False
        super().__init__(address, handler)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sel = selectors.DefaultSelector()
        sel.register(sock, selectors.EVENT_READ)
        try:
            while True:
                if not sel.select(IDLE_POLL_S):
                    if self.server.draining:
                        return
                    continue
                try:
                    frame = wire.read_frame(sock)
                except EOFError:
                    return
                except (wire.VersionMismatch, wire.MalformedFrame, wire.FrameTooLarge) as exc:
                    self._send(wire.Frame(wire.ERROR, 0, 0, 0,
                                          wire.encode_error(wire.E_BAD_REQUEST, str(exc), self.server.service.shard_id)))
                    return
                except OSError:
                    return
                reply = self.server.service.handle(frame)
                if not self._send(reply):
                    return
        finally:
            sel.close()

    def _send(self, frame: wire.Frame) -> bool:
        try:
            self.request.sendall(wire.encode_frame(frame))
            return True
        except OSError:
            return False


class _Service:
    shard_id = MAIN_SHARD

    def __init__(self, tracer: Tracer | None):
        self.tracer = tracer or Tracer(self.shard_id, enabled=False)
        self._server = None
        self._thread = None

    def _error(self, frame: wire.Frame, exc: BaseException) -> wire.Frame:
        shard = getattr(exc, "shard_id", None)
        shard = self.shard_id if shard is None else shard
        return wire.Frame(wire.ERROR, frame.trace_id, frame.parent_span_id, frame.request_id,
                          wire.encode_error(wire.error_code(exc), str(exc), shard))

    def bind(self, host: str, port: int) -> tuple[str, int]:
        self._server = _Server((host, port), _Handler, self)
        return self._server.server_address[:2]

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def serve_forever(self) -> None:
        self._server.serve_forever(poll_interval=IDLE_POLL_S)

    def start(self) -> "_Service":
        self._thread = threading.Thread(target=self.serve_forever, name=f"serve-{self.shard_id}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        """Graceful drain: stop accepting, let in-flight requests finish, flush traces."""
        if self._server is None:
            return
        self._server.draining = True
        if self._thread is not None:
            self._server.shutdown()
            self._thread.join()
            self._thread = None
        self._server.server_close()
        self._server = None
        self.close()
        self.tracer.close()

    def close(self) -> None:
        pass


class SparseService(_Service):
    """Serves lookups for every deployment this shard hosts."""

    def __init__(self, shard_id: int, deployments: list[tuple[ModelSpec, ShardPlan]],
                 tracer: Tracer | None = None, rpc_delay_ms: float = 0.0):
        self.shard_id = shard_id
        super().__init__(tracer)
        self.delay_s = rpc_delay_ms / 1e3
        self.tables: dict[str, ShardTables] = {}
        for spec, plan in deployments:
            if shard_id >= plan.num_sparse_shards:
                raise ValidationError(f"plan {plan.plan_hash} has no shard {shard_id}")
            self.tables[plan.plan_hash] = ShardTables(spec, plan, shard_id)

    def handle(self, frame: wire.Frame) -> wire.Frame:
        if frame.msg_type != wire.LOOKUP_REQ:
            return self._error(frame, ValidationError(f"sparse shard cannot serve msg_type {frame.msg_type}"))
        if self.delay_s:
            time.sleep(self.delay_s)
        try:
            with self.tracer.span(RPC_SERVICE, SPARSE_ROOT_NAME, frame.trace_id, frame.parent_span_id,
                                  frame.request_id) as sp:
                sp.phase(RPC_SERDE, "decode_lookup")
                lk = wire.decode_lookup_request(frame.payload)
                sp.phase(RPC_SERVICE, "dispatch", args={"net": lk.net_id, "batch": lk.batch_index})
                tables = self.tables.get(lk.plan_key)
                if tables is None:
                    if lk.plan_key == "" and len(self.tables) == 1:
                        tables = next(iter(self.tables.values()))
                    else:
                        raise ValidationError(f"no deployment for plan {lk.plan_key!r} on shard {self.shard_id}")
                results = execute_sparse_shard(lk, tables, sp)
                sp.phase(RPC_SERDE, "encode_lookup_resp")
                payload = wire.encode_lookup_response(results)
        except Exception as exc:  # noqa: BLE001 - every failure becomes an Error frame
            if not isinstance(exc, RecShardError):
                log.exception("lookup failed on shard %d", self.shard_id)
            return self._error(frame, exc)
        return wire.Frame(wire.LOOKUP_RESP, frame.trace_id, frame.parent_span_id, frame.request_id, payload)


class MainService(_Service):
    """Accepts ranking requests and runs them through the engine."""

    def __init__(self, deployments: list[tuple[ModelSpec, ShardPlan]], topology: Topology,
                 tracer: Tracer | None = None, workers: int | None = None, rpc_deadline: float = 1.0):
        super().__init__(tracer)
        self.client = SparseClient(topology)
        self.engines: dict[str, Engine] = {}
        for spec, plan in deployments:
            if plan.num_sparse_shards > topology.num_shards:
                raise ValidationError(f"plan {plan.plan_hash} needs {plan.num_sparse_shards} shards, "
                                      f"topology lists {topology.num_shards}")
            key = plan.plan_hash
            self.engines[key] = Engine(spec, plan, None if plan.is_singular else self.client, self.tracer,
                                       workers, rpc_deadline, key)

    def _engine(self, key: str) -> Engine:
        eng = self.engines.get(key)
        if eng is None and key == "" and len(self.engines) == 1:
            eng = next(iter(self.engines.values()))
        if eng is None:
            raise ValidationError(f"no deployment for plan {key!r}")
        return eng

    def handle(self, frame: wire.Frame) -> wire.Frame:
        if frame.msg_type != wire.RANKING_REQ:
            return self._error(frame, ValidationError(f"main shard cannot serve msg_type {frame.msg_type}"))
        trace_id = frame.trace_id or new_id(128)
        try:
            with self.tracer.span(RPC_SERVICE, ROOT_NAME, trace_id, 0, frame.request_id) as root:
                root.phase(RPC_SERDE, "decode_request")
                req, key, bs = wire.decode_ranking_request(frame.payload, frame.request_id)
                root.phase(RPC_SERVICE, "dispatch")
                eng = self._engine(key)
                if bs == wire.BATCH_DEFAULT:
                    bs = eng.spec.default_batch_size
                elif bs == wire.BATCH_SINGLE:
                    bs = SINGLE_BATCH
                scores = eng.execute_request(req, bs, root)
                root.phase(RPC_SERDE, "encode_response")
                payload = wire.encode_ranking_response(scores, now_ns() - root.start_ns)
        except Exception as exc:  # noqa: BLE001
            if not isinstance(exc, RecShardError):
                log.exception("request %d failed", frame.request_id)
            return self._error(frame, exc)
        return wire.Frame(wire.RANKING_RESP, trace_id, 0, frame.request_id, payload)

    def close(self) -> None:
        for eng in self.engines.values():
            eng.close()
        self.client.close()


def serve_sparse(shard_id: int, deployments, topology: Topology, tracer: Tracer | None = None,
                 host: str | None = None, port: int | None = None) -> SparseService:
    """Bind a sparse shard on its topology endpoint (or an explicit host/port)."""
    svc = SparseService(shard_id, deployments, tracer, topology.rpc_delay_ms)
    ep = topology.shards.get(shard_id, ("127.0.0.1", 0))
    svc.bind(host or ep[0], ep[1] if port is None else port)
    return svc


def serve_main(deployments, topology: Topology, tracer: Tracer | None = None, workers: int | None = None,
               rpc_deadline: float = 1.0, host: str | None = None, port: int | None = None) -> MainService:
    svc = MainService(deployments, topology, tracer, workers, rpc_deadline)
    svc.bind(host or topology.main[0], topology.main[1] if port is None else port)
    return svc
