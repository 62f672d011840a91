import json
import random
from pathlib import Path

import pytest

from recshard.planner import LOAD_BALANCED, SINGULAR, make_plan
from recshard.replayer import WorkloadProfile, generate_requests
from recshard.tracing import (
    LAYERS, MAIN_SHARD, TRACE_FORMAT, TraceEvent, Tracer, export_trace, merge_events, merge_traces,
    read_trace_file,
)

from synth import run_traced

GOLDEN = Path(__file__).parent / "golden"


def test_golden_records_decode_byte_exact():
    path = GOLDEN / "trace_records.ndjson"
    lines = path.read_text().splitlines()
    tf = read_trace_file(path)
    assert tf.header == {"format": TRACE_FORMAT, "version": 1, "shard_id": -1} and tf.corrupt == 0
    assert [e.to_line() for e in tf.events] == lines[1:]
    root = tf.events[0]
    assert (root.trace_id, root.span_id, root.layer, root.name, root.dur_ns, root.cpu_ns) == \
           (0x0123456789ABCDEF0011223344556677, 0xA1, "rpc_service", "e2e", 9000, 4000)
    rpc = tf.events[3]
    assert rpc.is_async and rpc.args["dst_shard"] == 0
    merged = merge_traces([path])
    assert len(merged.traces) == 1 and not merged.orphans
    assert len(merged.traces[0].events) == 6


def test_nesting_within_parent():
    tr = Tracer(0)
    with tr.span("rpc_service", "A", 1) as a:
        with a.child("sparse_op", "B") as b:
            b.phase("sparse_op", "B1")
            sum(range(1000))
            b.end_phase()
    evs = {e.name: e for e in tr.drain()}
    A, B, B1 = evs["A"], evs["B"], evs["B1"]
    assert B.parent_span_id == A.span_id and B1.parent_span_id == B.span_id
    assert A.start_ns <= B.start_ns and B.end_ns <= A.end_ns
    assert B.start_ns <= B1.start_ns and B1.end_ns <= B.end_ns
    assert all(0 <= e.cpu_ns <= e.dur_ns for e in evs.values())


def test_ten_thousand_spans_lossless(tmp_path):
    tr = Tracer(0, tmp_path / "t.ndjson", flush_interval=0.001)
    with tr.span("rpc_service", "root", 5) as root:
        for i in range(9999):
            root.phase("sparse_op", f"op{i}")
        root.end_phase()
    tr.close()
    tf = read_trace_file(tmp_path / "t.ndjson")
    assert len(tf.events) == 10_000 and tr.dropped == 0 and tr.written == 10_000


def test_buffer_full_drops_and_counts():
    tr = Tracer(0, capacity=5)
    with tr.span("rpc_service", "root", 5) as root:
        for i in range(10):
            root.phase("sparse_op", f"op{i}")
    assert len(tr.drain()) == 5
    assert tr.dropped == 6


def test_kill_switch(tmp_path, small_long_tail, lt_requests):
    plan = make_plan(small_long_tail, LOAD_BALANCED, 2)
    scores, paths = run_traced(small_long_tail, plan, lt_requests[:2], tmp_path, enabled=False)
    assert paths == [] and list(tmp_path.iterdir()) == []
    assert all(s.size for s in scores)


def test_three_shard_merge_structure(tmp_path, small_long_tail, lt_requests):
    plan = make_plan(small_long_tail, LOAD_BALANCED, 3)
    _, paths = run_traced(small_long_tail, plan, lt_requests, tmp_path)
    merged = merge_traces(paths)
    assert len(merged.traces) == len(lt_requests) and not merged.orphans and not merged.multi_root
    for t in merged.traces:
        assert t.root.shard_id == MAIN_SHARD and t.root.parent_span_id == 0
        for e in t.events:
            assert e.layer in LAYERS and 0 <= e.cpu_ns <= e.dur_ns
            if e.shard_id != MAIN_SHARD and t.span(e.parent_span_id).shard_id == MAIN_SHARD:
                assert e.name == "sparse_e2e"
                assert t.span(e.parent_span_id).is_async
        # same-host children nest inside their parents
        for e in t.events:
            if e.parent_span_id and not e.is_async:
                p = t.span(e.parent_span_id)
                if p.shard_id == e.shard_id and e.name != "schedule":
                    assert p.start_ns <= e.start_ns and e.end_ns <= p.end_ns


def test_merge_order_independent(tmp_path, small_long_tail, lt_requests):
    plan = make_plan(small_long_tail, LOAD_BALANCED, 3)
    _, paths = run_traced(small_long_tail, plan, lt_requests, tmp_path)
    a = merge_traces(paths)
    shuffled = list(reversed(paths))
    b = merge_traces(shuffled)
    lines = []
    for p in paths:
        lines += p.read_text().splitlines()[1:]
    random.Random(3).shuffle(lines)
    c = merge_events([TraceEvent.from_line(l) for l in lines])
    for other in (b, c):
        assert [(t.trace_id, [e.span_id for e in t.events]) for t in other.traces] == \
               [(t.trace_id, [e.span_id for e in t.events]) for t in a.traces]


def test_withheld_main_file_orphans_everything(tmp_path, small_long_tail, lt_requests):
    plan = make_plan(small_long_tail, LOAD_BALANCED, 3)
    _, paths = run_traced(small_long_tail, plan, lt_requests, tmp_path)
    sparse_only = [p for p in paths if p.name != "main.ndjson"]
    merged = merge_traces(sparse_only)
    n_sparse = sum(len(read_trace_file(p).events) for p in sparse_only)
    assert merged.traces == [] and len(merged.orphans) == n_sparse > 0


def test_corrupt_records_skipped_and_counted(tmp_path):
    src = (GOLDEN / "trace_records.ndjson").read_text().splitlines()
    path = tmp_path / "bad.ndjson"
    path.write_text("\n".join(src[:3] + ["{not json", '{"layer": "x"}'] + src[3:]) + "\n")
    merged = merge_traces([path])
    assert merged.corrupt == 2 and len(merged.traces) == 1


def test_export_singular_single_lane(tmp_path, small_long_tail, lt_requests):
    _, paths = run_traced(small_long_tail, make_plan(small_long_tail, SINGULAR), lt_requests[:1], tmp_path)
    trace = merge_traces(paths).traces[0]
    doc = export_trace(trace, tmp_path / "x.json")
    assert json.loads((tmp_path / "x.json").read_text()) == doc
    assert {e["pid"] for e in doc["traceEvents"]} == {0}


def test_export_eight_shards_nine_lanes_lossless(tmp_path, small_long_tail):
    spec = small_long_tail
    plan = make_plan(spec, LOAD_BALANCED, 8)
    req = generate_requests(spec, WorkloadProfile(seed=2, batch_size=64, candidates=(64, 64), pooling_scale=30), 1)
    _, paths = run_traced(spec, plan, req, tmp_path, batch=64)
    trace = merge_traces(paths).traces[0]
    doc = export_trace(trace)
    lanes = {e["pid"] for e in doc["traceEvents"]}
    assert len(lanes) == 9
    xs = [e for e in doc["traceEvents"] if e["ph"] == "X"]
    assert len(xs) == len(trace.events)
    by_id = {e.span_id: e for e in trace.events}
    for x in xs:
        assert x["args"]["dur_ns"] == by_id[int(x["args"]["span_id"], 16)].dur_ns
        assert x["dur"] * 1000 == pytest.approx(x["args"]["dur_ns"])
    # remote roots sit inside their parent RPC span on the shared timeline
    for x in xs:
        if x["name"] == "sparse_e2e":
            parent = next(p for p in xs if p["args"]["span_id"] == x["args"]["parent_span_id"])
            assert parent["ts"] <= x["ts"] + 1e-9 and x["ts"] + x["dur"] <= parent["ts"] + parent["dur"] + 1e-6
