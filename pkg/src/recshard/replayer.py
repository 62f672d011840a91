"""Seeded request generation and load replay.

Lookups per item follow a truncated discrete power law by default, fitted so
its mean equals the table's pooling factor. Requests are generated up front;
replay then either sends them one at a time (serial) or on a fixed schedule
that ignores responses (open loop), so queueing delay shows up in latency
instead of slowing the sender down.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ParseError, ProfileMismatch, RecShardError
from .model import CONCAT, USER, ModelSpec
from .runtime import RankingRequest, SparseColumn
from .tracing import new_id

SERIAL = "serial"
OPEN_LOOP = "open_loop"
MODES = (SERIAL, OPEN_LOOP)
CONSTANT = "constant"
POWER_LAW = "power_law"
DISTRIBUTIONS = (CONSTANT, POWER_LAW)
UNIFORM = "uniform"
DEFAULT_REQUESTS = 100
POISSON = "poisson"


@dataclass
class TableDistribution:
    dist: str = POWER_LAW
    mean: float | None = None  # None: take the model's estimated pooling factor


@dataclass
class WorkloadProfile:
    seed: int
    batch_size: int | None  # None = one batch per request
    candidates: tuple[int, int] = (64, 128)
    default_dist: str = POWER_LAW
    pooling_scale: float = 1.0
    tables: dict[int, TableDistribution] = field(default_factory=dict)
    dense_std: float = 1.0
    mode: str = SERIAL
    target_qps: float = 0.0
    n_requests: int | None = None  # neither this nor duration_s: DEFAULT_REQUESTS
    duration_s: float | None = None
    arrival: str = UNIFORM

    def __post_init__(self):
        self.candidates = tuple(int(c) for c in self.candidates)
        self.tables = {int(k): (v if isinstance(v, TableDistribution) else TableDistribution(**v))
                       for k, v in self.tables.items()}
        lo, hi = self.candidates
        problems = []
        if lo < 1 or hi < lo:
            problems.append(f"candidates range {self.candidates} invalid")
        if self.mode not in MODES:
            problems.append(f"mode {self.mode!r} not in {MODES}")
        if self.mode == OPEN_LOOP and not self.target_qps > 0:
            problems.append("open_loop needs target_qps > 0")
        if self.arrival not in (UNIFORM, POISSON):
            problems.append(f"arrival {self.arrival!r} unknown")
        if self.batch_size is not None and self.batch_size < 1:
            problems.append("batch_size must be >= 1 or null")
        for tid, td in self.tables.items():
            if td.dist not in DISTRIBUTIONS:
                problems.append(f"table {tid}: unknown distribution {td.dist!r}")
            if td.mean is not None and td.mean < 0:
                problems.append(f"table {tid}: negative mean")
        if self.n_requests is not None and self.duration_s is not None:
            problems.append("set n_requests or duration_s, not both")
        if self.default_dist not in DISTRIBUTIONS or self.pooling_scale <= 0:
            problems.append("bad default distribution or pooling_scale")
        if problems:
            raise ProfileMismatch("; ".join(problems))

    @property
    def request_count(self) -> int:
        if self.n_requests is not None:
            return int(self.n_requests)
        if self.duration_s is None:
            return DEFAULT_REQUESTS
        if self.target_qps > 0:
            return int(round(self.duration_s * self.target_qps))
        raise ProfileMismatch("duration_s needs target_qps to fix a request count")

    def to_json(self) -> str:
        d = asdict(self)
        d["candidates"] = list(self.candidates)
        d["tables"] = {str(k): asdict(v) for k, v in sorted(self.tables.items())}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WorkloadProfile":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"workload profile is not JSON: {exc.msg}", exc.lineno) from None
        if "seed" not in d or "batch_size" not in d:
            raise ProfileMismatch("workload profile must set seed and batch_size explicitly")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ProfileMismatch(str(exc)) from None

    @classmethod
    def load(cls, path) -> "WorkloadProfile":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")

    def workload_hash(self) -> str:
        """Hash of the fields that determine the generated requests."""
        d = json.loads(self.to_json())
        for k in ("mode", "target_qps", "duration_s", "n_requests", "arrival", "batch_size"):
            d.pop(k, None)
        d["n"] = self.request_count
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# per-item lookup counts


def _power_law_pmf(alpha: float, kmax: int) -> np.ndarray:
    k = np.arange(1, kmax + 1, dtype=np.float64)
    w = k ** -alpha
    return w / w.sum()


@lru_cache(maxsize=4096)
def power_law_params(mean: float) -> tuple[float, int]:
    """(alpha, kmax) so that P(k) ~ k^-alpha on [1, kmax] has the requested mean (> 1)."""
    kmax = max(2, math.ceil(4 * mean))
    ks = np.arange(1, kmax + 1, dtype=np.float64)

    def mean_of(a):
        return float(ks @ _power_law_pmf(a, kmax))

    lo, hi = 0.0, 60.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if mean_of(mid) > mean:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2, kmax


def sample_counts(rng: np.random.Generator, dist: str, mean: float, n: int) -> np.ndarray:
    """Draw ``n`` non-negative lookup counts with expectation ``mean``."""
    if dist == CONSTANT:
        return np.full(n, int(round(mean)), dtype=np.int32)
    if mean <= 1.0:
        return (rng.random(n) < mean).astype(np.int32)
    alpha, kmax = power_law_params(float(mean))
    return (rng.choice(kmax, size=n, p=_power_law_pmf(alpha, kmax)) + 1).astype(np.int32)


def table_distributions(spec: ModelSpec, profile: WorkloadProfile) -> dict[int, tuple[str, float]]:
    """Resolve (distribution, mean) for every table; concat tables are fixed-arity."""
    unknown = sorted(set(profile.tables) - {t.table_id for t in spec.tables})
    if unknown:
        raise ProfileMismatch(f"profile names tables {unknown} not in model {spec.model_id}")
    out = {}
    for t in spec.tables:
        if t.pooling == CONCAT:
            out[t.table_id] = (CONSTANT, float(t.concat_k))
            continue
        td = profile.tables.get(t.table_id, TableDistribution(profile.default_dist, None))
        mean = td.mean
        if mean is None:
            prof = spec.profile(t.table_id)
            if prof is None or prof.est_pooling_factor is None:
                raise ProfileMismatch(f"table {t.table_id} has no pooling factor in model or profile")
            mean = prof.est_pooling_factor * profile.pooling_scale
        out[t.table_id] = (td.dist, float(mean))
    return out


def generate_requests(spec: ModelSpec, profile: WorkloadProfile, n: int | None = None) -> list[RankingRequest]:
    """Deterministic request stream for ``profile.seed``."""
    n = profile.request_count if n is None else n
    dists = table_distributions(spec, profile)
    rng = np.random.default_rng(profile.seed)
    user, scoring = spec.user_net, spec.scoring_net
    two_nets = scoring is not user
    user_dim = user.dense_input_dim if two_nets else 0
    cand_tables = spec.candidate_net.table_ids if two_nets else ()
    lo, hi = profile.candidates
    out = []
    for rid in range(n):
        n_cand = int(rng.integers(lo, hi + 1))
        user_dense = (rng.standard_normal(user_dim) * profile.dense_std).astype(np.float32)
        user_sparse = {}
        for tid in user.table_ids:
            dist, mean = dists[tid]
            k = int(sample_counts(rng, dist, mean, 1)[0])
            user_sparse[tid] = rng.integers(0, spec.table(tid).num_rows, k, dtype=np.int64)
        cand_dense = (rng.standard_normal((n_cand, scoring.dense_input_dim)) * profile.dense_std).astype(np.float32)
        cand_sparse = {}
        for tid in cand_tables:
            dist, mean = dists[tid]
            lengths = sample_counts(rng, dist, mean, n_cand)
            idx = rng.integers(0, spec.table(tid).num_rows, int(lengths.sum()), dtype=np.int64)
            cand_sparse[tid] = SparseColumn(lengths, idx)
        out.append(RankingRequest(rid, user_dense, user_sparse, cand_dense, cand_sparse))
    return out


def realized_pooling(spec: ModelSpec, requests: list[RankingRequest]) -> dict[int, float]:
    """Mean lookups per item for each table (user tables: per request)."""
    tot = {t.table_id: 0 for t in spec.tables}
    items = {t.table_id: 0 for t in spec.tables}
    for r in requests:
        for tid, idx in r.user_sparse.items():
            tot[tid] += idx.size
            items[tid] += 1
        for tid, col in r.candidate_sparse.items():
            tot[tid] += col.indices.size
            items[tid] += col.lengths.size
    return {tid: tot[tid] / items[tid] for tid in tot if items[tid]}


# --------------------------------------------------------------------------
# run log


RUNLOG_COLUMNS = ("request_id", "trace_id", "scheduled_ns", "send_ns", "recv_ns", "latency_ns",
                  "server_e2e_ns", "n_candidates", "status", "error")


@dataclass
class RunRecord:
    request_id: int
    trace_id: int
    scheduled_ns: int
    send_ns: int
    recv_ns: int
    latency_ns: int
    server_e2e_ns: int
    n_candidates: int
    status: str
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class RunLog:
    meta: dict
    records: list[RunRecord] = field(default_factory=list)

    @property
    def ok_records(self) -> list[RunRecord]:
        return [r for r in self.records if r.ok]

    def latencies_ns(self) -> np.ndarray:
        return np.array([r.latency_ns for r in self.ok_records], dtype=np.int64)

    @property
    def failures(self) -> int:
        return sum(not r.ok for r in self.records)

    def achieved_qps(self) -> float:
        sends = sorted(r.send_ns for r in self.records)
        if len(sends) < 2:
            return 0.0
        return (len(sends) - 1) / ((sends[-1] - sends[0]) / 1e9)

    def to_text(self) -> str:
        lines = [f"# {k}={v}" for k, v in sorted(self.meta.items())]
        lines.append("\t".join(RUNLOG_COLUMNS))
        for r in self.records:
            lines.append("\t".join([
                str(r.request_id), f"{r.trace_id:032x}", str(r.scheduled_ns), str(r.send_ns), str(r.recv_ns),
                str(r.latency_ns), str(r.server_e2e_ns), str(r.n_candidates), r.status,
                r.error.replace("\t", " ").replace("\n", " "),
            ]))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def parse(cls, text: str) -> "RunLog":
        meta, records, header = {}, [], None
        for lineno, line in enumerate(text.splitlines(), start=1):
            if line.startswith("# "):
                k, sep, v = line[2:].partition("=")
                if not sep:
                    raise ParseError("expected '# key=value'", lineno)
                meta[k] = v
                continue
            if not line:
                continue
            cells = line.split("\t")
            if header is None:
                if tuple(cells) != RUNLOG_COLUMNS:
                    raise ParseError("unexpected run log columns", lineno)
                header = cells
                continue
            if len(cells) != len(RUNLOG_COLUMNS):
                raise ParseError(f"expected {len(RUNLOG_COLUMNS)} columns, got {len(cells)}", lineno)
            try:
                records.append(RunRecord(int(cells[0]), int(cells[1], 16), *map(int, cells[2:8]),
                                         cells[8], cells[9]))
            except ValueError:
                raise ParseError("bad numeric field", lineno) from None
        return cls(meta, records)

    @classmethod
    def load(cls, path) -> "RunLog":
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read())


# --------------------------------------------------------------------------
# replay


def send_schedule(profile: WorkloadProfile, n: int) -> np.ndarray:
    """Send offsets in ns from the run start; depends only on seed, rate and count."""
    if profile.mode == SERIAL:
        return np.zeros(n, dtype=np.int64)
    gap = 1.0 / profile.target_qps
    if profile.arrival == POISSON:
        rng = np.random.default_rng([profile.seed, 0x5EED])
        t = np.concatenate(([0.0], np.cumsum(rng.exponential(gap, n - 1)))) if n else np.zeros(0)
    else:
        t = np.arange(n) * gap
    return (t * 1e9).astype(np.int64)


def _monotonic_ns() -> int:
    return time.perf_counter_ns()


def replay(requests: list[RankingRequest], client, profile: WorkloadProfile, plan_key: str = "",
           meta: dict | None = None, max_in_flight: int = 64, origin_ns: int | None = None) -> RunLog:
    """Send ``requests`` through ``client.rank`` and record client-side latency.

    Open-loop latency runs from the scheduled send time, so a backed-up
    sender is charged to the system under test. Recorded times are relative
    to ``origin_ns`` (default: this call's start).
    """
    from .wire import BATCH_SINGLE

    batch = BATCH_SINGLE if profile.batch_size is None else profile.batch_size
    log_meta = {"seed": profile.seed, "workload_hash": profile.workload_hash(), "mode": profile.mode,
                "target_qps": profile.target_qps, "batch_size": profile.batch_size, "plan_hash": plan_key,
                "n_requests": len(requests)}
    log_meta.update(meta or {})
    n = len(requests)
    records: list[RunRecord | None] = [None] * n

    def one(i: int, scheduled: int) -> None:
        req = requests[i]
        trace_id = new_id(128)
        send = _monotonic_ns()
        try:
            res = client.rank(req, plan_key, batch, trace_id)
            status, err, e2e = "ok", "", res.server_e2e_ns
        except RecShardError as exc:
            status, err, e2e = type(exc).__name__, str(exc), 0
        except OSError as exc:
            status, err, e2e = "ShardUnavailable", str(exc), 0
        recv = _monotonic_ns()
        records[i] = RunRecord(req.request_id, trace_id, scheduled, send, recv, recv - scheduled, e2e,
                               req.n_candidates, status, err)

    t0 = _monotonic_ns()
    if profile.mode == SERIAL:
        for i in range(n):
            one(i, _monotonic_ns())
    else:
        offsets = send_schedule(profile, n)
        with ThreadPoolExecutor(max_workers=max_in_flight, thread_name_prefix="replay") as pool:
            futs = []
            for i in range(n):
                due = t0 + int(offsets[i])
                wait = (due - _monotonic_ns()) / 1e9
                if wait > 0:
                    time.sleep(wait)
                futs.append(pool.submit(one, i, due))
            for f in futs:
                f.result()
    # store times relative to the run start so logs from different runs line up
    origin = t0 if origin_ns is None else origin_ns
    for r in records:
        r.scheduled_ns -= origin
        r.send_ns -= origin
        r.recv_ns -= origin
    return RunLog({k: ("" if v is None else v) for k, v in log_meta.items()}, records)


class LocalClient:
    """``rank``-compatible adapter over an in-process engine (tests and dry runs)."""

    def __init__(self, engine):
        self.engine = engine
        self._lock = threading.Lock()

    def rank(self, request, plan_key="", batch_size=None, trace_id=None):
        from .transport import RankResult
        from .wire import BATCH_DEFAULT, BATCH_SINGLE

        if batch_size == BATCH_DEFAULT:
            batch_size = self.engine.spec.default_batch_size
        elif batch_size == BATCH_SINGLE:
            batch_size = None
        t = time.perf_counter_ns()
        scores = self.engine.execute_request(request, batch_size, trace_id=trace_id)
        return RankResult(scores, trace_id or 0, time.perf_counter_ns() - t)
