import socket
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recshard.errors import ParseError, ProfileMismatch
from recshard.planner import SINGULAR, estimate_pooling_factors, make_plan
from recshard.replayer import (
    OPEN_LOOP, POISSON, SERIAL, RunLog, TableDistribution, WorkloadProfile, generate_requests, power_law_params,
    realized_pooling, replay, sample_counts, send_schedule, table_distributions,
)
from recshard.runtime import Engine
from recshard.replayer import LocalClient
from recshard.transport import MainClient, RankResult


class FakeClient:
    def __init__(self, delay=0.0, fail=False):
        self.delay = delay
        self.fail = fail
        self.calls = []

    def rank(self, request, plan_key="", batch_size=None, trace_id=None):
        self.calls.append(time.perf_counter_ns())
        time.sleep(self.delay)
        if self.fail:
            raise OSError("nope")
        return RankResult(np.zeros(request.n_candidates, np.float32), trace_id, 1)


def test_constant_pooling_exact(small_long_tail):
    spec = small_long_tail
    cand = spec.candidate_net.table_ids[0]
    prof = WorkloadProfile(seed=1, batch_size=8, candidates=(100, 100),
                           tables={cand: TableDistribution("constant", 5.0)})
    reqs = generate_requests(spec, prof, 100)
    assert sum(r.n_candidates for r in reqs) == 10_000
    assert realized_pooling(spec, reqs)[cand] == 5.0


def test_same_seed_same_stream(small_long_tail):
    prof = WorkloadProfile(seed=7, batch_size=8, candidates=(3, 30))
    a = generate_requests(small_long_tail, prof, 20)
    b = generate_requests(small_long_tail, prof, 20)
    assert a == b
    c = generate_requests(small_long_tail, WorkloadProfile(seed=8, batch_size=8, candidates=(3, 30)), 20)
    assert a != c


def test_realized_matches_recount(small_long_tail):
    spec = small_long_tail
    reqs = generate_requests(spec, WorkloadProfile(seed=2, batch_size=8, candidates=(1, 50)), 40)
    got = realized_pooling(spec, reqs)
    for t in spec.tables:
        if spec.net(t.net_id).role == "user":
            counts = [len(r.user_sparse.get(t.table_id, [])) for r in reqs]
        else:
            counts = [len(c.sparse.get(t.table_id, [])) for r in reqs for c in r.candidates]
        assert got[t.table_id] == sum(counts) / len(counts)
    est = {p.table_id: p.est_pooling_factor for p in estimate_pooling_factors(spec, reqs)}
    assert est == got


@pytest.mark.parametrize("mean", [0.3, 1.0, 1.7, 4.2, 12.0, 40.0])
def test_power_law_mean_converges(mean):
    rng = np.random.default_rng(5)
    draws = sample_counts(rng, "power_law", mean, 200_000)
    assert draws.min() >= 0
    assert abs(draws.mean() - mean) <= 0.02 * mean + 0.01
    if mean > 1:
        alpha, kmax = power_law_params(mean)
        assert draws.max() <= kmax and alpha >= 0


def test_indices_within_rows(small_long_tail):
    spec = small_long_tail
    for r in generate_requests(spec, WorkloadProfile(seed=4, batch_size=8, pooling_scale=5), 5):
        r.validate(spec)
        for tid, idx in r.user_sparse.items():
            assert idx.size == 0 or 0 <= idx.min() <= idx.max() < spec.table(tid).num_rows
        for tid, col in r.candidate_sparse.items():
            assert col.indices.size == 0 or col.indices.max() < spec.table(tid).num_rows


def test_profile_mismatch(small_long_tail):
    with pytest.raises(ProfileMismatch):
        table_distributions(small_long_tail, WorkloadProfile(seed=1, batch_size=8, tables={999: {"dist": "constant",
                                                                                               "mean": 1.0}}))
    with pytest.raises(ProfileMismatch):
        WorkloadProfile(seed=1, batch_size=8, mode=OPEN_LOOP, target_qps=0)
    with pytest.raises(ProfileMismatch):
        WorkloadProfile.from_json('{"seed": 1}')
    with pytest.raises(ParseError):
        WorkloadProfile.from_json("{oops")


def test_profile_json_round_trip(tmp_path):
    prof = WorkloadProfile(seed=3, batch_size=None, tables={2: TableDistribution("constant", 2.0)},
                           mode=OPEN_LOOP, target_qps=25, duration_s=20)
    prof.save(tmp_path / "p.json")
    back = WorkloadProfile.load(tmp_path / "p.json")
    assert back == prof and back.request_count == 500
    serial = WorkloadProfile(**{**prof.__dict__, "mode": SERIAL, "batch_size": 4, "target_qps": 0.0,
                                "duration_s": None, "n_requests": 500})
    assert serial.workload_hash() == prof.workload_hash()


def test_serial_no_overlap(small_long_tail):
    reqs = generate_requests(small_long_tail, WorkloadProfile(seed=1, batch_size=8, candidates=(2, 4)), 100)
    log = replay(reqs, FakeClient(0.0005), WorkloadProfile(seed=1, batch_size=8))
    assert len(log.records) == 100 and log.failures == 0
    for a, b in zip(log.records, log.records[1:]):
        assert a.recv_ns <= b.send_ns
    assert [r.request_id for r in log.records] == list(range(100))


def test_open_loop_schedule_ignores_latency(small_long_tail):
    reqs = generate_requests(small_long_tail, WorkloadProfile(seed=1, batch_size=8, candidates=(2, 4)), 40)
    prof = WorkloadProfile(seed=1, batch_size=8, mode=OPEN_LOOP, target_qps=40)
    fast = replay(reqs, FakeClient(0.0), prof)
    slow = replay(reqs, FakeClient(0.3), prof)
    want = send_schedule(prof, 40)
    for log in (fast, slow):
        np.testing.assert_array_equal([r.scheduled_ns for r in log.records], want)
        assert abs(log.achieved_qps() - 40) <= 0.05 * 40
    # requests overlap when responses are slower than the gap
    overlaps = sum(a.recv_ns > b.send_ns for a, b in zip(slow.records, slow.records[1:]))
    assert overlaps > 30
    assert all(r.latency_ns >= 0.3e9 for r in slow.records)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(1, 500), st.integers(1, 300))
def test_schedule_depends_only_on_seed_rate_count(seed, qps, n):
    for arrival in ("uniform", POISSON):
        p = WorkloadProfile(seed=seed, batch_size=8, mode=OPEN_LOOP, target_qps=qps, arrival=arrival)
        a = send_schedule(p, n)
        assert len(a) == n and a[0] == 0 and np.all(np.diff(a) >= 0)
        assert np.array_equal(a, send_schedule(p, n))


def test_unreachable_endpoint_all_failed(small_long_tail):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    reqs = generate_requests(small_long_tail, WorkloadProfile(seed=1, batch_size=8, candidates=(2, 4)), 12)
    client = MainClient(("127.0.0.1", port), connect_timeout=0.5, timeout=1)
    for prof in (WorkloadProfile(seed=1, batch_size=8),
                 WorkloadProfile(seed=1, batch_size=8, mode=OPEN_LOOP, target_qps=200)):
        log = replay(reqs, client, prof)
        assert len(log.records) == 12 and log.failures == 12
        assert {r.status for r in log.records} == {"ShardUnavailable"}
    client.close()


def test_runlog_round_trip(tmp_path, small_long_tail):
    spec = small_long_tail
    reqs = generate_requests(spec, WorkloadProfile(seed=1, batch_size=8, candidates=(2, 4)), 5)
    with Engine(spec, make_plan(spec, SINGULAR)) as eng:
        log = replay(reqs, LocalClient(eng), WorkloadProfile(seed=1, batch_size=8), meta={"config": "x"})
    log.records[0].error = "tab\there"
    log.save(tmp_path / "r.tsv")
    back = RunLog.load(tmp_path / "r.tsv")
    assert back.meta["config"] == "x" and back.meta["seed"] == "1"
    assert [r.latency_ns for r in back.records] == [r.latency_ns for r in log.records]
    assert back.records[0].error == "tab here"
    with pytest.raises(ParseError):
        RunLog.parse("a\tb\n")
