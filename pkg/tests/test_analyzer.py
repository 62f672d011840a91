import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recshard import analyzer as an
from recshard.cli import main as cli_main
from recshard.errors import EmptyInput, MalformedTrace, WorkloadMismatch
from recshard.planner import LOAD_BALANCED, NSBP, SINGULAR, make_plan
from recshard.replayer import RunLog, RunRecord
from recshard.tracing import (
    DENSE_OP, MAIN_SHARD, RPC_SERDE, RPC_SERVICE, RPC_WAIT, SPARSE_OP, RequestTrace, TraceEvent, merge_traces,
)
from synth import run_traced

TID = 0x5EED


def ev(sid, parent, shard, layer, name, start, dur, cpu=0, args=None, rid=1, tid=TID):
    return TraceEvent(tid, sid, parent, shard, rid, layer, name, start, dur, cpu, args)


def rpc(sid, parent, dst, start, dur):
    return ev(sid, parent, MAIN_SHARD, RPC_WAIT, f"rpc:shard{dst}", start, dur,
              args={"async": True, "dst_shard": dst, "net": 0, "batch": 0})


def remote(sid, parent, shard, start, decode, ops, encode):
    """A sparse-side root tiled by decode / sls / encode phases."""
    dur = decode + ops + encode
    return [
        ev(sid, parent, shard, RPC_SERVICE, "sparse_e2e", start, dur, cpu=dur),
        ev(sid + 1, sid, shard, RPC_SERDE, "decode_lookup", start, decode, cpu=decode),
        ev(sid + 2, sid, shard, SPARSE_OP, "sls", start + decode, ops, cpu=ops),
        ev(sid + 3, sid, shard, RPC_SERDE, "encode_lookup_resp", start + decode + ops, encode, cpu=encode),
    ]


def distributed_trace(shard1_remote=(10, 400, 40), rpc1=(260, 580), rpc0=(260, 500)):
    """Main E2E of 1000 ns with one RPC round to two shards.

    main: decode 50 | dense 200 | rpc_wait 600 | dense 100 | encode 50
    """
    events = [
        ev(1, 0, MAIN_SHARD, RPC_SERVICE, "e2e", 0, 1000, cpu=500),
        ev(2, 1, MAIN_SHARD, RPC_SERDE, "decode_request", 0, 50, cpu=50),
        ev(3, 1, MAIN_SHARD, DENSE_OP, "bottom", 50, 200, cpu=200),
        ev(4, 1, MAIN_SHARD, RPC_WAIT, "rpc_wait:net0", 250, 600, cpu=20),
        ev(5, 1, MAIN_SHARD, DENSE_OP, "top", 850, 100, cpu=100),
        ev(6, 1, MAIN_SHARD, RPC_SERDE, "encode_response", 950, 50, cpu=50),
        rpc(10, 4, 0, *rpc0),
        rpc(11, 4, 1, *rpc1),
    ]
    events += remote(20, 10, 0, 300, 20, 300, 80)
    events += remote(30, 11, 1, 350, *shard1_remote)
    root = events[0]
    return RequestTrace(TID, 1, root, events)


def singular_trace():
    events = [
        ev(1, 0, MAIN_SHARD, RPC_SERVICE, "e2e", 0, 700, cpu=700),
        ev(2, 1, MAIN_SHARD, RPC_SERDE, "decode_request", 0, 30, cpu=30),
        ev(3, 1, MAIN_SHARD, SPARSE_OP, "sls:t0", 30, 400, cpu=400),
        ev(4, 1, MAIN_SHARD, DENSE_OP, "mlp", 430, 250, cpu=250),
        ev(5, 1, MAIN_SHARD, RPC_SERDE, "encode_response", 680, 20, cpu=20),
    ]
    return RequestTrace(TID, 1, events[0], events)


# ---------------------------------------------------------------- percentiles


def test_percentile_hand_values():
    vals = list(range(1, 101))
    assert an.percentile(vals, 99) == 99
    assert an.percentile(vals, 50) == 50
    assert an.percentile(vals, 100) == 100
    assert an.percentile([7], 50) == 7 and an.percentile([7], 99) == 7
    assert an.percentile([3, 1, 2], 50) == 2


def test_percentile_empty_and_bad_p():
    with pytest.raises(EmptyInput):
        an.percentile([], 50)
    with pytest.raises(ValueError):
        an.percentile([1, 2], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-10**9, 10**9), min_size=1, max_size=300), st.sampled_from([1, 25, 50, 90, 99, 100]))
def test_percentile_matches_sort_and_index(vals, p):
    srt = sorted(vals)
    want = srt[max(1, math.ceil(p * len(vals) / 100)) - 1]
    assert an.percentile(vals, p) == want
    assert an.percentile(vals, p) == np.percentile(vals, p, method="inverted_cdf")
    assert vals[an.nearest_rank_index(vals, p)] == want


# ---------------------------------------------------------------- attribution


def test_distributed_attribution_by_hand():
    a = an.attribute_request(distributed_trace())
    assert a.e2e_ns == 1000 and a.unattributed_ns == 0
    assert a.layers == {an.DENSE_OPS: 300, an.EMBEDDED: 600, RPC_SERDE: 100, RPC_SERVICE: 0, an.NET_OVERHEAD: 0}
    assert a.stack_sum == a.e2e_ns
    (rnd,) = a.rounds
    # shard 1 spent 450 ns against shard 0's 400, so it bounds the round
    assert rnd.bounding_shard == 1 and rnd.remote_e2e_ns == 450 and rnd.outstanding_ns == 580
    assert rnd.network_ns == 130
    assert sorted(a.network_ns) == [100, 130]
    assert a.embedded == {an.SPARSE_OPS: 400, RPC_SERDE: 50, RPC_SERVICE: 0, an.REMOTE_NET: 0,
                          an.NETWORK: 130, an.MAIN_WAIT: 20}
    assert sum(a.embedded.values()) == a.layers[an.EMBEDDED]
    assert a.rpc_count == 2 and a.rpcs_per_batch == {0: 2}
    assert a.cpu_ns == {MAIN_SHARD: 420, 0: 400, 1: 450}


def test_tie_goes_to_lowest_shard():
    # shard 1 now takes exactly as long as shard 0
    a = an.attribute_request(distributed_trace(shard1_remote=(20, 300, 80)))
    assert a.rounds[0].bounding_shard == 0
    assert a.rounds[0].network_ns == 500 - 400


def test_network_latency_and_floor():
    c = an.NetworkCounter()
    assert an.network_latency(10, 7, c) == 3
    assert an.network_latency(5, 7, c) == 0
    assert (c.negative, c.total) == (1, 2)


def test_negative_network_counted_in_attribution():
    # shard 0's RPC looks shorter than its own remote E2E (clock noise)
    a = an.attribute_request(distributed_trace(rpc0=(260, 350)))
    assert a.negative_network == 1
    assert min(a.network_ns) == 0
    assert a.stack_sum == a.e2e_ns


def test_singular_embedded_is_local_sparse_time():
    a = an.attribute_request(singular_trace())
    assert a.layers[an.EMBEDDED] == 400
    assert a.embedded[an.SPARSE_OPS] == 400
    for k in (RPC_SERDE, RPC_SERVICE, an.NETWORK, an.REMOTE_NET):
        assert a.embedded[k] == 0
    assert a.rpc_count == 0 and not a.rounds
    assert a.stack_sum == a.e2e_ns == 700


def test_rpc_without_remote_side_is_malformed():
    t = distributed_trace()
    events = [e for e in t.events if e.shard_id != 1]
    with pytest.raises(MalformedTrace):
        an.attribute_request(RequestTrace(TID, 1, events[0], events))


def test_attribute_run_skips_malformed():
    good = distributed_trace()
    bad_events = [e for e in distributed_trace().events if e.shard_id != 1]
    bad = RequestTrace(TID, 1, bad_events[0], bad_events)
    from recshard.tracing import MergedTraces

    rep = an.attribute_run(MergedTraces([good, bad], []))
    assert len(rep.attributions) == 1 and rep.skipped == 1
    with pytest.raises(MalformedTrace):
        an.attribute_run(MergedTraces([good, bad], []), strict=True)


@pytest.mark.parametrize("strategy,k", [(SINGULAR, 1), (LOAD_BALANCED, 4), (NSBP, 3)])
def test_totality_on_real_traces(tmp_path, small_long_tail, lt_requests, strategy, k):
    plan = make_plan(small_long_tail, strategy, k)
    _, paths = run_traced(small_long_tail, plan, lt_requests, tmp_path, batch=8)
    rep = an.attribute_run(merge_traces(paths), strict=True)
    assert len(rep.attributions) == len(lt_requests)
    assert rep.max_totality_error() <= an.TOTALITY_TOL
    for a in rep.attributions:
        assert a.e2e_ns > 0 and all(v >= 0 for v in a.layers.values())
        if strategy == SINGULAR:
            assert a.embedded[an.NETWORK] == 0 and a.rpc_count == 0
        else:
            assert a.rpc_count > 0 and a.rounds


# ---------------------------------------------------------------- comparison


def fake_run(e2es, cpu=1000, rpcs=2, meta=None):
    atts = []
    for i, e in enumerate(e2es):
        layers = dict.fromkeys(an.STACK_LAYERS, 0)
        layers[an.EMBEDDED] = e // 2
        layers[an.DENSE_OPS] = e - e // 2
        atts.append(an.Attribution(i, i, e, layers, dict.fromkeys(an.EMBEDDED_LAYERS, 0), 0,
                                   rpc_count=rpcs, cpu_ns={MAIN_SHARD: cpu}))
    recs = [RunRecord(i, i, 0, 0, e + 100, e + 100, e, 10, "ok") for i, e in enumerate(e2es)]
    m = {"seed": 1, "workload_hash": "abc", "model_id": "m", **(meta or {})}
    return an.RunData(RunLog(m, recs), an.AttributionReport(atts))


def test_self_compare_is_identity():
    run = fake_run([100, 200, 300, 400])
    rep = an.compare_runs(run, run)
    assert all(v == 1.0 for v in rep.e2e_ratio.values())
    assert all(v == 1.0 for v in rep.client_ratio.values())
    assert rep.cpu_ratio == rep.rpc_ratio == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 10**7), min_size=1, max_size=40), st.lists(st.integers(1, 10**7), min_size=1, max_size=40),
       st.integers(1, 10**6), st.integers(1, 10**6))
def test_compare_symmetry(a, b, ca, cb):
    A, B = fake_run(a, ca, 1), fake_run(b, cb, 3)
    ab, ba = an.compare_runs(A, B), an.compare_runs(B, A)
    for p in an.PERCENTILES:
        assert ab.e2e_ratio[p] * ba.e2e_ratio[p] == pytest.approx(1.0)
    assert ab.cpu_ratio * ba.cpu_ratio == pytest.approx(1.0)
    assert ab.rpc_ratio == pytest.approx(3 * len(b) / len(a))


def test_compare_workload_mismatch():
    with pytest.raises(WorkloadMismatch):
        an.compare_runs(fake_run([1, 2]), fake_run([1, 2], meta={"seed": 2}))
    with pytest.raises(WorkloadMismatch):
        an.compare_runs(fake_run([1, 2]), fake_run([1, 2], meta={"workload_hash": "xyz"}))


def test_compare_empty_raises():
    with pytest.raises(EmptyInput):
        an.compare_runs(fake_run([1]), fake_run([]))


# ---------------------------------------------------------------- tables


def test_normalize_by_tallest_config():
    rows = [{"config": "a", "percentile": 50, "e2e_ns": 100, **dict.fromkeys(an.STACK_LAYERS, 20)},
            {"config": "b", "percentile": 50, "e2e_ns": 200, **dict.fromkeys(an.STACK_LAYERS, 40)}]
    norm = an.normalize_stacks(rows)
    assert [r["e2e_norm"] for r in norm] == [0.5, 1.0]
    assert norm[0][an.DENSE_OPS] == pytest.approx(0.1)
    assert sum(norm[1][k] for k in an.STACK_LAYERS) == pytest.approx(1.0)


def test_tsv_round_trip(tmp_path):
    rep = an.AttributionReport([an.attribute_request(distributed_trace())])
    an.write_tsv(tmp_path / "a.tsv", an.ATTRIBUTION_COLUMNS, an.attribution_rows(rep), {"seed": 4, "plan_hash": "p"})
    meta, rows = an.read_tsv(tmp_path / "a.tsv")
    assert meta == {"plan_hash": "p", "seed": "4"}
    assert list(rows[0]) == list(an.ATTRIBUTION_COLUMNS)
    assert int(rows[0]["e2e_ns"]) == 1000 and int(rows[0]["emb_network"]) == 130


def test_percentile_rows_pick_nearest_rank_request():
    traces = []
    for i, e2e in enumerate([500, 700, 900]):
        events = [ev(1, 0, MAIN_SHARD, RPC_SERVICE, "e2e", 0, e2e, rid=i, tid=i + 1),
                  ev(2, 1, MAIN_SHARD, DENSE_OP, "mlp", 0, e2e, rid=i, tid=i + 1)]
        traces.append(RequestTrace(i + 1, i, events[0], events))
    from recshard.tracing import MergedTraces

    rep = an.attribute_run(MergedTraces(traces, []))
    rows = an.percentile_rows(rep, "x")
    assert [(r["percentile"], r["e2e_ns"]) for r in rows] == [(50, 700), (90, 900), (99, 900)]


def test_per_shard_latencies(tmp_path):
    t = distributed_trace()
    from recshard.tracing import MergedTraces

    dist = an.per_shard_latencies(MergedTraces([t], []))
    assert dist[0] == {"sparse_op_ns": [300], "e2e_ns": [400]}
    assert dist[1] == {"sparse_op_ns": [400], "e2e_ns": [450]}
    assert dist[MAIN_SHARD]["e2e_ns"] == [1000]
    rows = an.per_shard_rows(dist)
    assert {r["shard_id"] for r in rows} == {MAIN_SHARD, 0, 1}


# ---------------------------------------------------------------- cli


def test_cli_sweep_and_analyze(tmp_path, capsys):
    out = tmp_path / "sweep"
    rc = cli_main(["sweep", "--archetype", "long_tail", "--scale", "2MiB", "--seed", "4", "--count", "8",
                   "--batch-size", "16", "--strategies", "load_balanced,nsbp", "--shards", "2", "-o", str(out)])
    assert rc == 0
    for name in ("percentile_stacks.tsv", "rpc_cpu.tsv", "overheads.tsv", "per_shard.tsv",
                 "stack_p50.png", "stack_p99.png", "embedded_p50.png", "rpc_cpu.png", "overheads.png", "per_shard.png",
                 "attribution-singular.tsv", "attribution-load_balanced-2.tsv", "attribution-nsbp-2.tsv"):
        assert (out / name).stat().st_size > 0, name
    meta, rows = an.read_tsv(out / "overheads.tsv")
    assert meta["seed"] == "4" and meta["workload_hash"] and meta["plan_hashes"]
    assert {r["config"] for r in rows} == {"singular", "load_balanced-2", "nsbp-2"}
    singular_rows = [r for r in rows if r["config"] == "singular"]
    assert all(float(r["e2e_ratio"]) == 1.0 for r in singular_rows)

    traces = sorted(str(p) for p in (out / "runs" / "cluster").glob("trace-*.ndjson"))
    runlog = out / "runs" / "runlog-load_balanced-2.tsv"
    capsys.readouterr()
    assert cli_main(["analyze", "attribute", "--traces", *traces, "--runlog", str(runlog), "--label", "lb2",
                     "--fig-dir", str(tmp_path / "figs"), "-o", str(tmp_path / "attr.tsv")]) == 0
    line = capsys.readouterr().out
    assert "requests=8" in line and "skipped=0" in line
    assert (tmp_path / "figs" / "stack.png").exists() and (tmp_path / "attr-percentiles.tsv").exists()

    base = out / "runs" / "runlog-singular.tsv"
    assert cli_main(["analyze", "compare", "--baseline-log", str(base), "--baseline-traces", *traces,
                     "--candidate-log", str(runlog), "--candidate-traces", *traces,
                     "-o", str(tmp_path / "cmp.tsv")]) == 0
    assert "rpc_ratio=inf" in capsys.readouterr().out

    rid = an.read_tsv(tmp_path / "attr.tsv")[1][0]["trace_id"]
    assert cli_main(["analyze", "export-trace", "--traces", *traces, "--trace-id", rid,
                     "-o", str(tmp_path / "one.json")]) == 0
    assert "lanes=3" in capsys.readouterr().out

    assert cli_main(["analyze", "per-shard", "--traces", *traces, "--runlog", str(runlog),
                     "--fig-dir", str(tmp_path / "figs"), "-o", str(tmp_path / "ps.tsv")]) == 0
    assert "shards=3" in capsys.readouterr().out


def test_cli_generate_and_plan(tmp_path, capsys):
    assert cli_main(["generate", "--archetype", "single_dominant", "--scale", "2MiB", "--seed", "1",
                     "-o", str(tmp_path / "m.bin")]) == 0
    assert cli_main(["plan", "--model", str(tmp_path / "m.bin"), "--strategy", "nsbp", "--shards", "3",
                     "-o", str(tmp_path / "p.txt")]) == 0
    assert (tmp_path / "p.txt").read_text().strip()
    assert cli_main(["plan", "--model", str(tmp_path / "nope.bin"), "--strategy", "nsbp",
                     "-o", str(tmp_path / "q.txt")]) != 0
