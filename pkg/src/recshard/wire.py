"""Binary wire format.

Frame header (big-endian, 38 bytes including the length word)::

    u32 length        bytes following this field (header rest + payload)
    u8  version       FRAME_VERSION
    u8  msg_type      1 RankingReq, 2 RankingResp, 3 LookupReq, 4 LookupResp, 5 Error
    16B trace_id
    u64 parent_span_id
    u64 request_id
    ... payload

Payload bodies are little-endian. Strings are u16 length + UTF-8. Arrays are
a u32 element count followed by raw elements: int32 lengths, int64 indices,
float32 dense values and scores, float64 pooled partials.

LookupReq:   str plan_key, u32 net_id, u32 batch_index, u32 n_entries,
             n x {u32 table_id, u32 partition_index, i32[] lengths, i64[] indices}
LookupResp:  u32 n_results, n x {u32 table_id, u32 partition_index, u32 rows, u32 cols, f64[rows*cols]}
RankingReq:  str plan_key, u32 batch_size (0 server default, 0xFFFFFFFF one batch),
             f32[] user_dense, u32 n_user, n x {u32 table_id, i64[] indices},
             u32 rows, u32 cols, f32[rows*cols] candidate_dense,
             u32 n_cols, n x {u32 table_id, i32[] lengths, i64[] indices}
RankingResp: u64 server_e2e_ns, f32[] scores
Error:       u16 code, i32 shard_id, str message
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    FrameTooLarge, IndexOutOfRange, MalformedFrame, RecShardError, RemoteExecutionError, RpcTimeout,
    ShardUnavailable, UnknownPartition, ValidationError, VersionMismatch,
)
from .runtime import LookupEntry, PooledResult, RankingRequest, SparseColumn, SparseLookupRequest

FRAME_VERSION = 1
MAX_FRAME_BYTES = 64 << 20

RANKING_REQ = 1
RANKING_RESP = 2
LOOKUP_REQ = 3
LOOKUP_RESP = 4
ERROR = 5
MSG_TYPES = (RANKING_REQ, RANKING_RESP, LOOKUP_REQ, LOOKUP_RESP, ERROR)

BATCH_DEFAULT = 0
BATCH_SINGLE = 0xFFFFFFFF

_HEADER = struct.Struct(">IBB16sQQ")
HEADER_BYTES = _HEADER.size
_AFTER_LEN = HEADER_BYTES - 4

# error codes
E_SHARD_UNAVAILABLE = 1
E_RPC_TIMEOUT = 2
E_REMOTE = 3
E_UNKNOWN_PARTITION = 4
E_INDEX_OUT_OF_RANGE = 5
E_BAD_REQUEST = 6


@dataclass(frozen=True)
class Frame:
    msg_type: int
    trace_id: int = 0
    parent_span_id: int = 0
    request_id: int = 0
    payload: bytes = b""
    version: int = FRAME_VERSION


def encode_frame(frame: Frame, max_bytes: int = MAX_FRAME_BYTES) -> bytes:
    length = _AFTER_LEN + len(frame.payload)
    if length + 4 > max_bytes:
        raise FrameTooLarge(f"frame of {length + 4} bytes exceeds {max_bytes}")
    head = _HEADER.pack(length, frame.version, frame.msg_type, frame.trace_id.to_bytes(16, "big"),
                        frame.parent_span_id, frame.request_id)
    return head + bytes(frame.payload)


def _check_header(length: int, version: int, msg_type: int, max_bytes: int) -> None:
    if version != FRAME_VERSION:
        raise VersionMismatch(f"frame version {version}, expected {FRAME_VERSION}")
    if length < _AFTER_LEN:
        raise MalformedFrame(f"length field {length} shorter than the header")
    if length + 4 > max_bytes:
        raise FrameTooLarge(f"frame of {length + 4} bytes exceeds {max_bytes}")
    if msg_type not in MSG_TYPES:
        raise MalformedFrame(f"unknown msg_type {msg_type}")


def decode_frame(buf: bytes, max_bytes: int = MAX_FRAME_BYTES) -> Frame:
    """Decode exactly one frame from ``buf``."""
    if len(buf) < HEADER_BYTES:
        raise MalformedFrame(f"buffer of {len(buf)} bytes is shorter than a frame header")
    length, version, msg_type, tid, parent, rid = _HEADER.unpack_from(buf)
    _check_header(length, version, msg_type, max_bytes)
    if len(buf) != length + 4:
        raise MalformedFrame(f"length field says {length + 4} bytes, buffer has {len(buf)}")
    return Frame(msg_type, int.from_bytes(tid, "big"), parent, rid, bytes(buf[HEADER_BYTES:]), version)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        got = sock.recv(n - len(chunks))
        if not got:
            raise EOFError("connection closed")
        chunks += got
    return bytes(chunks)


def read_frame(sock: socket.socket, max_bytes: int = MAX_FRAME_BYTES) -> Frame:
    """Blocking read of one frame; raises EOFError on a clean close between frames."""
    head = _recv_exact(sock, HEADER_BYTES)
    length, version, msg_type, tid, parent, rid = _HEADER.unpack(head)
    _check_header(length, version, msg_type, max_bytes)
    payload = _recv_exact(sock, length - _AFTER_LEN)
    return Frame(msg_type, int.from_bytes(tid, "big"), parent, rid, payload, version)


class FrameAssembler:
    """Incremental decoder for non-blocking sockets."""

    def __init__(self, max_bytes: int = MAX_FRAME_BYTES):
        self.buf = bytearray()
        self.max_bytes = max_bytes
        self.need = None

    def feed(self, data: bytes) -> Frame | None:
        self.buf += data
        if self.need is None and len(self.buf) >= HEADER_BYTES:
            length, version, msg_type, *_ = _HEADER.unpack_from(self.buf)
            _check_header(length, version, msg_type, self.max_bytes)
            self.need = length + 4
        if self.need is not None and len(self.buf) >= self.need:
            frame = decode_frame(bytes(self.buf[:self.need]), self.max_bytes)
            del self.buf[:self.need]
            self.need = None
            return frame
        return None


# --------------------------------------------------------------------------
# payload helpers


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def i32(self, v):
        self.parts.append(struct.pack("<i", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def str(self, s: str):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.parts.append(b)

    def raw(self, arr: np.ndarray, dtype: str):
        self.parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def array(self, arr: np.ndarray, dtype: str):
        arr = np.asarray(arr).reshape(-1)
        self.u32(arr.size)
        self.raw(arr, dtype)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def _take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise MalformedFrame(f"payload truncated at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self._take(s))[0]

    def u16(self):
        return self._unpack("<H")

    def u32(self):
        return self._unpack("<I")

    def i32(self):
        return self._unpack("<i")

    def u64(self):
        return self._unpack("<Q")

    def str(self) -> str:
        n = self.u16()
        try:
            return bytes(self._take(n)).decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedFrame("string field is not UTF-8") from None

    def raw(self, count: int, dtype: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self._take(count * dt.itemsize), dtype=dt).astype(dt.newbyteorder("="))

    def array(self, dtype: str) -> np.ndarray:
        return self.raw(self.u32(), dtype)

    def done(self):
        if self.pos != len(self.buf):
            raise MalformedFrame(f"{len(self.buf) - self.pos} trailing payload bytes")


def _column(r: _Reader) -> SparseColumn:
    lengths = r.array("<i4")
    indices = r.array("<i8")
    try:
        return SparseColumn(lengths, indices)
    except ValidationError as exc:
        raise MalformedFrame(str(exc)) from None


# --------------------------------------------------------------------------
# messages


def encode_lookup_request(lk: SparseLookupRequest) -> bytes:
    w = _Writer()
    w.str(lk.plan_key)
    w.u32(lk.net_id)
    w.u32(lk.batch_index)
    w.u32(len(lk.entries))
    for e in lk.entries:
        w.u32(e.table_id)
        w.u32(e.partition_index)
        w.array(e.lengths, "<i4")
        w.array(e.indices, "<i8")
    return w.bytes()


def decode_lookup_request(payload: bytes) -> SparseLookupRequest:
    r = _Reader(payload)
    key = r.str()
    net_id, batch = r.u32(), r.u32()
    entries = []
    for _ in range(r.u32()):
        tid, part = r.u32(), r.u32()
        col = _column(r)
        entries.append(LookupEntry(tid, part, col.lengths, col.indices))
    r.done()
    return SparseLookupRequest(net_id, batch, entries, key)


def encode_lookup_response(results: list[PooledResult]) -> bytes:
    w = _Writer()
    w.u32(len(results))
    for res in results:
        v = np.asarray(res.values)
        w.u32(res.table_id)
        w.u32(res.partition_index)
        w.u32(v.shape[0])
        w.u32(v.shape[1])
        w.raw(v, "<f8")
    return w.bytes()


def decode_lookup_response(payload: bytes) -> list[PooledResult]:
    r = _Reader(payload)
    out = []
    for _ in range(r.u32()):
        tid, part, rows, cols = r.u32(), r.u32(), r.u32(), r.u32()
        out.append(PooledResult(tid, part, r.raw(rows * cols, "<f8").reshape(rows, cols)))
    r.done()
    return out


def encode_ranking_request(req: RankingRequest, plan_key: str = "", batch_size=BATCH_DEFAULT) -> bytes:
    if batch_size is None:
        batch_size = BATCH_SINGLE
    w = _Writer()
    w.str(plan_key)
    w.u32(int(batch_size))
    w.array(req.user_dense, "<f4")
    w.u32(len(req.user_sparse))
    for tid in sorted(req.user_sparse):
        w.u32(tid)
        w.array(req.user_sparse[tid], "<i8")
    rows, cols = req.candidate_dense.shape
    w.u32(rows)
    w.u32(cols)
    w.raw(req.candidate_dense, "<f4")
    w.u32(len(req.candidate_sparse))
    for tid in sorted(req.candidate_sparse):
        col = req.candidate_sparse[tid]
        w.u32(tid)
        w.array(col.lengths, "<i4")
        w.array(col.indices, "<i8")
    return w.bytes()


def decode_ranking_request(payload: bytes, request_id: int = 0) -> tuple[RankingRequest, str, int]:
    """Returns ``(request, plan_key, batch_size)``; batch_size keeps the wire sentinels."""
    r = _Reader(payload)
    key = r.str()
    batch = r.u32()
    user_dense = r.array("<f4")
    user_sparse = {}
    for _ in range(r.u32()):
        tid = r.u32()
        user_sparse[tid] = r.array("<i8")
    rows, cols = r.u32(), r.u32()
    dense = r.raw(rows * cols, "<f4").reshape(rows, cols)
    cand = {}
    for _ in range(r.u32()):
        tid = r.u32()
        cand[tid] = _column(r)
    r.done()
    return RankingRequest(request_id, user_dense, user_sparse, dense, cand), key, batch


def encode_ranking_response(scores: np.ndarray, server_e2e_ns: int = 0) -> bytes:
    w = _Writer()
    w.u64(server_e2e_ns)
    w.array(scores, "<f4")
    return w.bytes()


def decode_ranking_response(payload: bytes) -> tuple[np.ndarray, int]:
    r = _Reader(payload)
    e2e = r.u64()
    scores = r.array("<f4")
    r.done()
    return scores, e2e


def encode_error(code: int, message: str, shard_id: int = -1) -> bytes:
    w = _Writer()
    w.u16(code)
    w.i32(shard_id)
    w.str(message[:4000])
    return w.bytes()


def decode_error(payload: bytes) -> tuple[int, int, str]:
    r = _Reader(payload)
    code, shard, msg = r.u16(), r.i32(), r.str()
    r.done()
    return code, shard, msg


def error_code(exc: BaseException) -> int:
    if isinstance(exc, ShardUnavailable):
        return E_SHARD_UNAVAILABLE
    if isinstance(exc, RpcTimeout):
        return E_RPC_TIMEOUT
    if isinstance(exc, UnknownPartition):
        return E_UNKNOWN_PARTITION
    if isinstance(exc, IndexOutOfRange):
        return E_INDEX_OUT_OF_RANGE
    if isinstance(exc, (ValidationError, MalformedFrame, ValueError)):
        return E_BAD_REQUEST
    return E_REMOTE


def error_from_payload(payload: bytes) -> RecShardError:
    """Rebuild a caller-side exception from an Error frame."""
    code, shard, msg = decode_error(payload)
    if code == E_SHARD_UNAVAILABLE:
        exc = ShardUnavailable(shard)
    elif code == E_RPC_TIMEOUT:
        exc = RpcTimeout(shard)
    else:
        return RemoteExecutionError(msg, code, shard)
    exc.args = (msg,)
    return exc
