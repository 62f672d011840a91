import hashlib
import socket
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recshard import wire
from recshard.errors import (
    FrameTooLarge, MalformedFrame, RemoteExecutionError, RpcTimeout, ShardUnavailable, UnknownPartition,
    VersionMismatch,
)
from recshard.runtime import LookupEntry, PooledResult, RankingRequest, SparseColumn, SparseLookupRequest

GOLDEN = Path(__file__).parent / "golden"
TID = 0x0123456789ABCDEF0011223344556677
PARENT = 0x1122334455667788

# fixtures are frozen; a changed digest means the byte layout moved
DIGESTS = {
    "lookup_req.bin": "22f91a578d4fe1a143d5cfd0ba944951601cdef4581f9dfddbc6422b2f9cd011",
    "lookup_resp.bin": "95975fd73262e70e3ac7637488252bf6b13536d36277eafceb2ab51ba371edfb",
    "ranking_req.bin": "e474f0b24f14c528924fa58ad2fdb822eb8d376b4f7a1278b7c74d7c546ab38c",
    "ranking_resp.bin": "0e7d1073b03614bb0937274b1ada6dd0b0a28dd286d88b2ad4847c0327e7a64b",
    "error.bin": "23adb54b66ad8b34401b36fbb36fd9668398f5217085bfbd5a42feb6b9fb1ac8",
}


def golden(name):
    raw = (GOLDEN / name).read_bytes()
    assert hashlib.sha256(raw).hexdigest() == DIGESTS[name]
    return raw


def golden_lookup():
    return SparseLookupRequest(1, 2, [LookupEntry(7, 0, [2, 0, 1], [5, 9, 3]), LookupEntry(12, 3, [1], [40])],
                               "a1b2c3d4e5f60718")


def test_lookup_req_golden_header_by_hand():
    raw = golden("lookup_req.bin")
    assert raw[:4] == (len(raw) - 4).to_bytes(4, "big")
    assert raw[4] == 1 and raw[5] == 3
    assert raw[6:22] == bytes.fromhex("0123456789abcdef0011223344556677")
    assert raw[22:30] == bytes.fromhex("1122334455667788")
    assert raw[30:38] == (42).to_bytes(8, "big")
    # payload: u16 key length then the key bytes, little-endian
    assert raw[38:40] == (16).to_bytes(2, "little") and raw[40:56] == b"a1b2c3d4e5f60718"
    assert raw[56:60] == (1).to_bytes(4, "little") and raw[60:64] == (2).to_bytes(4, "little")


def test_lookup_req_golden_round_trip():
    raw = golden("lookup_req.bin")
    f = wire.decode_frame(raw)
    assert (f.msg_type, f.trace_id, f.parent_span_id, f.request_id) == (wire.LOOKUP_REQ, TID, PARENT, 42)
    lk = wire.decode_lookup_request(f.payload)
    want = golden_lookup()
    assert (lk.net_id, lk.batch_index, lk.plan_key) == (want.net_id, want.batch_index, want.plan_key)
    assert lk.entries == want.entries
    assert wire.encode_frame(wire.Frame(wire.LOOKUP_REQ, TID, PARENT, 42, wire.encode_lookup_request(want))) == raw


def test_lookup_resp_golden():
    raw = golden("lookup_resp.bin")
    res = wire.decode_lookup_response(wire.decode_frame(raw).payload)
    want = [PooledResult(7, 0, np.array([[0.5, -1.25], [0.0, 0.0], [3.0, 0.125]])),
            PooledResult(12, 3, np.array([[1e-3, 2.5]]))]
    assert res == want
    assert wire.encode_frame(wire.Frame(wire.LOOKUP_RESP, TID, PARENT, 42, wire.encode_lookup_response(want))) == raw


def test_ranking_golden():
    raw = golden("ranking_req.bin")
    f = wire.decode_frame(raw)
    req, key, batch = wire.decode_ranking_request(f.payload, f.request_id)
    want = RankingRequest(9, [0.5, -0.5], {0: [1, 2, 2]}, np.array([[1.0, 2.0], [3.0, 4.0]]),
                          {4: SparseColumn.from_lists([[0], [6, 7]])})
    assert req == want and key == "" and batch == wire.BATCH_SINGLE
    assert wire.encode_frame(wire.Frame(wire.RANKING_REQ, TID, 0, 9, wire.encode_ranking_request(want, "", None))) == raw
    scores, e2e = wire.decode_ranking_response(wire.decode_frame(golden("ranking_resp.bin")).payload)
    assert scores.tolist() == [0.25, 0.75] and e2e == 123456789


def test_error_golden():
    f = wire.decode_frame(golden("error.bin"))
    assert wire.decode_error(f.payload) == (wire.E_UNKNOWN_PARTITION, 2, "table 7 partition 0 not hosted")
    exc = wire.error_from_payload(f.payload)
    assert isinstance(exc, RemoteExecutionError) and exc.code == wire.E_UNKNOWN_PARTITION


def test_error_mapping_keeps_types():
    for exc, cls in ((ShardUnavailable(3, "gone"), ShardUnavailable), (RpcTimeout(1, 0.5), RpcTimeout)):
        back = wire.error_from_payload(wire.encode_error(wire.error_code(exc), str(exc), 3))
        assert isinstance(back, cls) and str(back) == str(exc)
    assert wire.error_code(UnknownPartition(1, 2)) == wire.E_UNKNOWN_PARTITION
    assert wire.error_code(KeyError("x")) == wire.E_REMOTE


def test_header_size():
    assert wire.HEADER_BYTES == 38


@pytest.mark.parametrize("name", sorted(DIGESTS))
def test_truncation_is_malformed(name):
    raw = golden(name)
    for cut in (0, 1, 10, wire.HEADER_BYTES - 1, len(raw) - 1):
        with pytest.raises(MalformedFrame):
            wire.decode_frame(raw[:cut])


def test_truncated_payload_body_is_malformed():
    f = wire.decode_frame(golden("lookup_req.bin"))
    for cut in range(len(f.payload)):
        with pytest.raises(MalformedFrame):
            wire.decode_lookup_request(f.payload[:cut])
    with pytest.raises(MalformedFrame):
        wire.decode_lookup_request(f.payload + b"\0")


def test_version_and_type_and_size_checks():
    raw = bytearray(golden("lookup_req.bin"))
    raw[4] = 2
    with pytest.raises(VersionMismatch):
        wire.decode_frame(bytes(raw))
    raw[4] = 1
    raw[5] = 9
    with pytest.raises(MalformedFrame):
        wire.decode_frame(bytes(raw))
    with pytest.raises(FrameTooLarge):
        wire.encode_frame(wire.Frame(wire.LOOKUP_REQ, payload=b"x" * 100), max_bytes=64)
    big = struct.pack(">IBB16sQQ", wire.MAX_FRAME_BYTES, 1, 3, b"\0" * 16, 0, 0)
    with pytest.raises(FrameTooLarge):
        wire.FrameAssembler().feed(big)


ids = st.lists(st.integers(0, 2**40), max_size=20)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 5), st.integers(0, 2**128 - 1), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
       st.binary(max_size=300))
def test_frame_round_trip(mt, tid, parent, rid, payload):
    f = wire.Frame(wire.MSG_TYPES[mt % 5], tid, parent, rid, payload)
    raw = wire.encode_frame(f)
    assert wire.decode_frame(raw) == f
    asm = wire.FrameAssembler()
    got = [asm.feed(raw[i:i + 7]) for i in range(0, len(raw), 7)]
    assert [g for g in got if g is not None] == [f]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 500), st.integers(0, 7), st.lists(ids, max_size=5)), max_size=5),
       st.text(max_size=20))
def test_lookup_round_trip(entries, key):
    lk = SparseLookupRequest(1, 3, [LookupEntry(t, p, [len(x) for x in items], [i for x in items for i in x])
                                    for t, p, items in entries], key)
    back = wire.decode_lookup_request(wire.encode_lookup_request(lk))
    assert back.entries == lk.entries and back.plan_key == key


def test_read_frame_over_socketpair():
    a, b = socket.socketpair()
    try:
        raw = golden("lookup_req.bin")
        a.sendall(raw + raw)
        assert wire.read_frame(b) == wire.decode_frame(raw)
        assert wire.read_frame(b) == wire.decode_frame(raw)
        a.close()
        with pytest.raises(EOFError):
            wire.read_frame(b)
    finally:
        b.close()
