"""Seeded synthetic model generators.

Three archetypes:

* ``long_tail`` - two nets, many tables with a heavy-tailed size spread.
  User-net tables are small but lookup-heavy; candidate-net tables carry
  most of the bytes.
* ``long_tail_small`` - same shape with roughly half the tables and a
  fatter largest table.
* ``single_dominant`` - one net; one table holds ~89% of the sparse bytes
  and is looked up exactly once per request.

Dense layers and table counts are shrunk for small budgets so that
embedding tables stay above 97% of model bytes.
"""

from __future__ import annotations

import math
import re
import zlib

import numpy as np

from .errors import BudgetTooSmall
from .model import (
    CANDIDATE, CONCAT, FLOAT_BYTES, IDENTITY, RELU, SUM, USER, DenseLayer, EmbeddingTable, ModelSpec,
    Net, TableProfile, validate_spec,
)

ARCHETYPES = ("long_tail", "long_tail_small", "single_dominant")
MIB = 1 << 20
GIB = 1 << 30
MIN_BUDGET = MIB
DOMINANT_SHARE = 0.89
MAX_DENSE_SHARE = 0.02

_SIZE_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([kmgt]i?b?|b)?\s*$", re.IGNORECASE)
_UNITS = {"": 1, "b": 1, "k": 1 << 10, "m": MIB, "g": GIB, "t": 1 << 40}


def parse_size(text) -> int:
    """'64MiB', '1.5g', '1048576' -> bytes (binary units)."""
    if isinstance(text, (int, np.integer)):
        return int(text)
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ValueError(f"cannot parse size {text!r}")
    unit = (m.group(2) or "").lower()[:1]
    return int(float(m.group(1)) * _UNITS[unit])


def _table_count(archetype: str, budget: int) -> int:
    steps = max(0.0, math.log2(budget / MIB))
    if archetype == "long_tail":
        return int(min(257, 24 + 12 * steps))
    if archetype == "long_tail_small":
        return int(min(133, 12 + 6 * steps))
    return int(min(39, 10 + 3 * steps))


def _dims(budget: int) -> tuple[int, ...]:
    if budget < 4 * MIB:
        return (4, 8)
    if budget < 32 * MIB:
        return (8, 16)
    if budget < GIB:
        return (16, 32)
    return (32, 64)


def _hidden(budget: int) -> int:
    if budget < 8 * MIB:
        return 8
    if budget < 64 * MIB:
        return 16
    if budget < GIB:
        return 32
    return 64


class _LayerFactory:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.layers: list[DenseLayer] = []

    def make(self, net_id: int, in_dim: int, out_dim: int, activation: str = RELU) -> int:
        lid = len(self.layers)
        scale = math.sqrt(2.0 / in_dim)
        w = (self.rng.standard_normal((out_dim, in_dim), dtype=np.float32) * np.float32(scale))
        b = (self.rng.standard_normal(out_dim, dtype=np.float32) * np.float32(0.01))
        self.layers.append(DenseLayer(lid, net_id, w, b, activation))
        return lid


def _plan_tables(archetype: str, budget: int, rng: np.random.Generator, shrink: int):
    """Return [(net_role, dim, share, pooling_factor, pooling, concat_k)] with shares summing to 1."""
    n = max(4, _table_count(archetype, budget) // shrink)
    dims = _dims(budget)
    if archetype == "single_dominant":
        rest = n - 1
        w = rng.pareto(2.0, rest) + 1.0
        w = w / w.sum() * (1.0 - DOMINANT_SHARE)
        out = [(USER, dims[-1], DOMINANT_SHARE, 1.0, SUM, 0)]
        for share in w:
            pf = round(float(1.0 + rng.pareto(1.5) * 3.0), 1)
            out.append((USER, int(rng.choice(dims)), float(share), min(pf, 200.0), SUM, 0))
        return out

    n_user = max(2, int(round(n * 0.4)))
    roles = [USER] * n_user + [CANDIDATE] * (n - n_user)
    if archetype == "long_tail":
        w = np.minimum(rng.pareto(1.5, n) + 1.0, 12.0)
    else:
        w = np.minimum(rng.pareto(1.2, n) + 1.0, 30.0)
    # user tables are small but looked up heavily
    w = w * np.where(np.array(roles) == USER, 0.25, 1.0)
    shares = w / w.sum()
    out = []
    for role, share in zip(roles, shares):
        if role == USER:
            pf = 1.0 + float(rng.pareto(1.2)) * 8.0
            pf = min(pf, 400.0)
        else:
            pf = 1.0 + float(rng.pareto(1.5)) * 2.0
            pf = min(pf, 60.0)
        out.append((role, int(rng.choice(dims)), float(share), round(pf, 1), SUM, 0))
    # one small fixed-arity concat table in the candidate net
    out.append((CANDIDATE, dims[0], 0.0, 2.0, CONCAT, 2))
    return out


def generate_model(archetype: str, scale, seed: int, pooling_scale: float = 1.0) -> ModelSpec:
    """Build a deterministic synthetic model of roughly ``scale`` bytes.

    ``pooling_scale`` multiplies the estimated pooling factors of every
    table except the dominant one (which stays at exactly 1).
    """
    if archetype not in ARCHETYPES:
        raise ValueError(f"unknown archetype {archetype!r}; expected one of {ARCHETYPES}")
    budget = parse_size(scale)
    if budget < MIN_BUDGET:
        raise BudgetTooSmall(f"budget {budget} bytes is below the {MIN_BUDGET} byte minimum")

    shrink = 1
    hidden = _hidden(budget)
    while True:
        spec = _build(archetype, budget, seed, pooling_scale, shrink, hidden)
        if spec.dense_bytes <= MAX_DENSE_SHARE * spec.total_bytes:
            return spec
        if hidden > 4:
            hidden //= 2
        else:
            shrink *= 2


def _build(archetype, budget, seed, pooling_scale, shrink, hidden) -> ModelSpec:
    code = zlib.crc32(archetype.encode())
    rng = np.random.default_rng([int(seed), code])
    plan = _plan_tables(archetype, budget, rng, shrink)
    sparse_budget = int(budget * (1.0 - MAX_DENSE_SHARE / 2))

    two_nets = archetype != "single_dominant"
    net_of = {USER: 0, CANDIDATE: 1}
    tables: list[EmbeddingTable] = []
    profiles: list[TableProfile] = []
    by_net: dict[int, list[int]] = {0: [], 1: []}
    for tid, (role, dim, share, pf, pooling, concat_k) in enumerate(plan):
        rows = max(1, int(share * sparse_budget) // (dim * FLOAT_BYTES))
        if pooling == CONCAT:
            rows = max(rows, 16)
        values = rng.standard_normal((rows, dim), dtype=np.float32) * np.float32(0.1)
        net_id = net_of[role]
        tables.append(EmbeddingTable(tid, net_id, rows, dim, values, pooling, concat_k))
        if pooling == CONCAT:
            est = float(concat_k)
        elif share == DOMINANT_SHARE and archetype == "single_dominant" and tid == 0:
            est = 1.0
        else:
            est = round(pf * pooling_scale, 1)
        profiles.append(TableProfile(tid, est, rows * dim * FLOAT_BYTES))
        by_net[net_id].append(tid)

    lf = _LayerFactory(rng)
    user_dense = 8 if budget < 8 * MIB else 16
    cand_dense = user_dense

    def pooled_width(tids):
        return sum(tables[t].pooled_width for t in tids)

    nets = []
    if two_nets:
        b0 = lf.make(0, user_dense, hidden)
        i0 = lf.make(0, hidden + pooled_width(by_net[0]), hidden)
        nets.append(Net(0, USER, user_dense, tuple(by_net[0]), (b0,), (i0,), ()))
        b1 = lf.make(1, cand_dense, hidden)
        i1 = lf.make(1, hidden + pooled_width(by_net[1]) + hidden, hidden)
        t1 = lf.make(1, hidden, max(2, hidden // 2))
        t2 = lf.make(1, max(2, hidden // 2), 1, IDENTITY)
        nets.append(Net(1, CANDIDATE, cand_dense, tuple(by_net[1]), (b1,), (i1,), (t1, t2)))
    else:
        b0 = lf.make(0, cand_dense, hidden)
        i0 = lf.make(0, hidden + pooled_width(by_net[0]), hidden)
        t1 = lf.make(0, hidden, max(2, hidden // 2))
        t2 = lf.make(0, max(2, hidden // 2), 1, IDENTITY)
        nets.append(Net(0, USER, cand_dense, tuple(by_net[0]), (b0,), (i0,), (t1, t2)))

    spec = ModelSpec(
        model_id=f"{archetype}-{budget}-s{seed}" + (f"-p{pooling_scale:g}" if pooling_scale != 1.0 else ""),
        nets=tuple(nets), tables=tuple(tables), layers=tuple(lf.layers),
        default_batch_size=32, profiles=tuple(profiles),
    )
    validate_spec(spec)
    return spec
