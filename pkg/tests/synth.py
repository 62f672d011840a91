"""Shared test helpers: tiny hand-built specs, a reference scorer and a traced local run."""

import numpy as np

from recshard.model import CANDIDATE, USER, EmbeddingTable, ModelSpec, Net, TableProfile
from recshard.runtime import Engine, LocalTransport
from recshard.tracing import MAIN_SHARD, Tracer


def sized_spec(net_tables, pooling=None, dim=1, model_id="synthetic"):
    """``net_tables``: list (one per net) of lists of row counts. Returns (spec, table ids per net)."""
    tables, nets, profiles, ids = [], [], [], []
    tid = 0
    for net_id, rows_list in enumerate(net_tables):
        mine = []
        for rows in rows_list:
            values = np.broadcast_to(np.float32(0), (rows, dim))
            tables.append(EmbeddingTable(tid, net_id, rows, dim, values))
            pf = pooling[tid] if pooling is not None else 1.0
            profiles.append(TableProfile(tid, pf, rows * dim * 4))
            mine.append(tid)
            tid += 1
        nets.append(Net(net_id, USER if net_id == 0 else CANDIDATE, 1, tuple(mine)))
        ids.append(mine)
    spec = ModelSpec(model_id, tuple(nets), tuple(tables), (), profiles=tuple(profiles))
    return spec, ids


def reference_scores(spec, request):
    """Item-at-a-time forward pass built only from sls_pool and fc_forward."""
    from recshard.model import CANDIDATE, fc_forward, sigmoid, sls_pool

    def run(net, dense, sparse_of, user_vec):
        x = np.asarray(dense, np.float32)
        for lid in net.bottom_layers:
            x = fc_forward(spec.layer(lid), x)
        parts = [x] + [sls_pool(spec.table(t), sparse_of(t)) for t in net.table_ids]
        if net.role == CANDIDATE:
            parts.append(user_vec)
        x = np.concatenate(parts)
        for lid in net.interaction_layers + net.top_layers:
            x = fc_forward(spec.layer(lid), x)
        return x

    def user_ids(t):
        return request.user_sparse.get(t, [])

    out = []
    for c in request.candidates:
        if spec.candidate_net is None:
            logit = run(spec.user_net, c.dense, user_ids, None)
        else:
            u = run(spec.user_net, request.user_dense, user_ids, None)
            logit = run(spec.candidate_net, c.dense, lambda t: c.sparse.get(t, []), u)
        out.append(sigmoid(logit)[0])
    return np.array(out, dtype=np.float32)


def rel_diff(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-30))) if a.size else 0.0


def run_traced(spec, plan, requests, tmp_path, batch=8, enabled=True):
    main = Tracer(MAIN_SHARD, tmp_path / "main.ndjson", enabled=enabled)
    shards = {s: Tracer(s, tmp_path / f"s{s}.ndjson", enabled=enabled) for s in range(plan.num_sparse_shards)}
    transport = None if plan.is_singular else LocalTransport(spec, plan, shards)
    scores = []
    with Engine(spec, plan, transport, tracer=main) as eng:
        for r in requests:
            scores.append(eng.execute_request(r, batch))
    for t in [main, *shards.values()]:
        t.close()
    paths = [p for p in [tmp_path / "main.ndjson", *(tmp_path / f"s{s}.ndjson" for s in shards)] if p.exists()]
    return scores, paths
