"""Recommendation model representation and operator semantics.

A model is a chain of one or two nets. The user net consumes request-level
features (one lookup item per batch); the candidate net, when present,
consumes per-candidate features plus the user net's output vector. The last
net in the chain is the scoring net and emits one logit per candidate.

In a single-net model the lone user net is the scoring net: its dense input
is the candidate dense vector while its embedding tables are still fed from
the request-level sparse features and broadcast across candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange, ValidationError

SUM = "sum"
CONCAT = "concat"
POOLINGS = (SUM, CONCAT)

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

USER = "user"
CANDIDATE = "candidate"
ROLES = (USER, CANDIDATE)

FLOAT_BYTES = 4


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    table_id: int
    net_id: int
    num_rows: int
    dim: int
    values: np.ndarray
    pooling: str = SUM
    # Concat tables take a fixed number of lookups per item so the pooled
    # width (dim * concat_k) is static.
    concat_k: int = 0

    @property
    def size_bytes(self) -> int:
        return self.num_rows * self.dim * FLOAT_BYTES

    @property
    def pooled_width(self) -> int:
        return self.dim * self.concat_k if self.pooling == CONCAT else self.dim

    def __eq__(self, other):
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            (self.table_id, self.net_id, self.num_rows, self.dim, self.pooling, self.concat_k)
            == (other.table_id, other.net_id, other.num_rows, other.dim, other.pooling, other.concat_k)
            and _same_array(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class DenseLayer:
    layer_id: int
    net_id: int
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = RELU

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])

    @property
    def size_bytes(self) -> int:
        return (self.weight.size + self.bias.size) * FLOAT_BYTES

    def __eq__(self, other):
        if not isinstance(other, DenseLayer):
            return NotImplemented
        return (
            (self.layer_id, self.net_id, self.activation) == (other.layer_id, other.net_id, other.activation)
            and _same_array(self.weight, other.weight)
            and _same_array(self.bias, other.bias)
        )


@dataclass(frozen=True)
class Net:
    net_id: int
    role: str
    dense_input_dim: int
    table_ids: tuple[int, ...]
    bottom_layers: tuple[int, ...] = ()
    interaction_layers: tuple[int, ...] = ()
    top_layers: tuple[int, ...] = ()

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return self.bottom_layers + self.interaction_layers + self.top_layers


@dataclass(frozen=True)
class TableProfile:
    table_id: int
    est_pooling_factor: float
    size_bytes: int


@dataclass(frozen=True, eq=False)
class ModelSpec:
    model_id: str
    nets: tuple[Net, ...]
    tables: tuple[EmbeddingTable, ...]
    layers: tuple[DenseLayer, ...]
    default_batch_size: int = 32
    profiles: tuple[TableProfile, ...] = ()
    _tables_by_id: dict = field(default=None, repr=False, compare=False)
    _layers_by_id: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_tables_by_id", {t.table_id: t for t in self.tables})
        object.__setattr__(self, "_layers_by_id", {l.layer_id: l for l in self.layers})

    def table(self, table_id: int) -> EmbeddingTable:
        return self._tables_by_id[table_id]

    def layer(self, layer_id: int) -> DenseLayer:
        return self._layers_by_id[layer_id]

    def net(self, net_id: int) -> Net:
        for n in self.nets:
            if n.net_id == net_id:
                return n
        raise KeyError(net_id)

    @property
    def user_net(self) -> Net:
        return next(n for n in self.nets if n.role == USER)

    @property
    def candidate_net(self) -> Net | None:
        return next((n for n in self.nets if n.role == CANDIDATE), None)

    @property
    def scoring_net(self) -> Net:
        return self.candidate_net or self.user_net

    def execution_order(self) -> list[Net]:
        """Nets in data-dependency order (user net first)."""
        cand = self.candidate_net
        return [self.user_net] if cand is None else [self.user_net, cand]

    def profile(self, table_id: int) -> TableProfile | None:
        for p in self.profiles:
            if p.table_id == table_id:
                return p
        return None

    @property
    def sparse_bytes(self) -> int:
        return sum(t.size_bytes for t in self.tables)

    @property
    def dense_bytes(self) -> int:
        return sum(l.size_bytes for l in self.layers)

    @property
    def total_bytes(self) -> int:
        return self.sparse_bytes + self.dense_bytes

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return (
            self.model_id == other.model_id
            and self.nets == other.nets
            and self.tables == other.tables
            and self.layers == other.layers
            and self.default_batch_size == other.default_batch_size
            and self.profiles == other.profiles
        )

    def validate(self) -> None:
        validate_spec(self)


def _same_array(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)


def validate_spec(spec: ModelSpec) -> None:
    """Raise ValidationError on the first structural inconsistency found."""
    problems = spec_problems(spec)
    if problems:
        raise ValidationError("; ".join(problems))


def spec_problems(spec: ModelSpec) -> list[str]:
    out: list[str] = []
    roles = [n.role for n in spec.nets]
    if any(r not in ROLES for r in roles):
        out.append(f"unknown net role in {roles}")
    if roles.count(USER) != 1:
        out.append("model needs exactly one user net")
    if roles.count(CANDIDATE) > 1:
        out.append("model has more than one candidate net")
    net_ids = [n.net_id for n in spec.nets]
    if len(set(net_ids)) != len(net_ids):
        out.append("duplicate net ids")
    if spec.default_batch_size < 1:
        out.append("default_batch_size must be >= 1")

    seen_tables: dict[int, int] = {}
    for t in spec.tables:
        if t.table_id in seen_tables:
            out.append(f"duplicate table id {t.table_id}")
        seen_tables[t.table_id] = t.net_id
        if t.num_rows < 1 or t.dim < 1:
            out.append(f"table {t.table_id}: rows and dim must be >= 1")
        if t.values.shape != (t.num_rows, t.dim):
            out.append(f"table {t.table_id}: values shape {t.values.shape} != ({t.num_rows}, {t.dim})")
        if t.values.dtype != np.float32:
            out.append(f"table {t.table_id}: values must be float32")
        if t.pooling not in POOLINGS:
            out.append(f"table {t.table_id}: unknown pooling {t.pooling!r}")
        if t.pooling == CONCAT and t.concat_k < 1:
            out.append(f"table {t.table_id}: concat pooling needs concat_k >= 1")
        if t.net_id not in net_ids:
            out.append(f"table {t.table_id}: references unknown net {t.net_id}")

    referenced: dict[int, int] = {}
    for n in spec.nets:
        for tid in n.table_ids:
            if tid in referenced:
                out.append(f"table {tid} referenced by nets {referenced[tid]} and {n.net_id}")
            referenced[tid] = n.net_id
            if tid not in seen_tables:
                out.append(f"net {n.net_id}: unknown table {tid}")
            elif seen_tables[tid] != n.net_id:
                out.append(f"table {tid}: net_id {seen_tables[tid]} but listed under net {n.net_id}")
    for tid in seen_tables:
        if tid not in referenced:
            out.append(f"table {tid} not referenced by any net")

    layer_ids = [l.layer_id for l in spec.layers]
    if len(set(layer_ids)) != len(layer_ids):
        out.append("duplicate layer ids")
    for l in spec.layers:
        if l.weight.ndim != 2 or l.bias.shape != (l.weight.shape[0],):
            out.append(f"layer {l.layer_id}: weight {l.weight.shape} / bias {l.bias.shape} inconsistent")
        if l.activation not in ACTIVATIONS:
            out.append(f"layer {l.layer_id}: unknown activation {l.activation!r}")
    if out:
        return out

    used_layers: set[int] = set()
    user_out = None
    for n in spec.execution_order():
        for lid in n.layer_ids:
            if lid not in spec._layers_by_id:
                out.append(f"net {n.net_id}: unknown layer {lid}")
                return out
            if lid in used_layers:
                out.append(f"layer {lid} used twice")
            used_layers.add(lid)
            if spec.layer(lid).net_id != n.net_id:
                out.append(f"layer {lid} belongs to net {spec.layer(lid).net_id}, listed under {n.net_id}")
        if not n.interaction_layers:
            out.append(f"net {n.net_id}: needs at least one interaction layer")
            return out
        width = n.dense_input_dim
        for lid in n.bottom_layers:
            width = _chain(out, spec.layer(lid), width)
        width += sum(spec.table(tid).pooled_width for tid in n.table_ids)
        if n.role == CANDIDATE:
            width += user_out or 0
        for lid in n.interaction_layers + n.top_layers:
            width = _chain(out, spec.layer(lid), width)
        if n is spec.scoring_net:
            if width != 1:
                out.append(f"scoring net {n.net_id} must output width 1, got {width}")
        else:
            user_out = width
    for lid in layer_ids:
        if lid not in used_layers:
            out.append(f"layer {lid} not used by any net")
    return out


def _chain(out: list[str], layer: DenseLayer, width: int) -> int:
    if layer.in_dim != width:
        out.append(f"layer {layer.layer_id}: expects input {layer.in_dim}, chain provides {width}")
    return layer.out_dim


# --------------------------------------------------------------------------
# operators


def check_indices(table: EmbeddingTable, indices: np.ndarray) -> None:
    if indices.size == 0:
        return
    lo, hi = int(indices.min()), int(indices.max())
    if lo < 0:
        raise IndexOutOfRange(table.table_id, lo, table.num_rows)
    if hi >= table.num_rows:
        raise IndexOutOfRange(table.table_id, hi, table.num_rows)


def pool_segments(values: np.ndarray, indices: np.ndarray, lengths: np.ndarray,
                  pooling: str = SUM, concat_k: int = 0) -> np.ndarray:
    """Pool variable-length index segments over the rows of ``values``.

    Returns a float64 (items x width) array. Sum pooling accumulates rows in
    segment order in double precision; concat pooling lays the rows out
    side by side. Callers are responsible for range checks.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    n = lengths.shape[0]
    dim = values.shape[1]
    if pooling == CONCAT:
        if np.any(lengths != concat_k):
            raise DimensionMismatch(f"concat pooling expects {concat_k} lookups per item")
        return values[indices].astype(np.float64).reshape(n, concat_k * dim)
    out = np.zeros((n, dim), dtype=np.float64)
    if indices.size == 0:
        return out
    gathered = values[indices].astype(np.float64)
    nonempty = lengths > 0
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))[nonempty]
    out[nonempty] = np.add.reduceat(gathered, starts, axis=0)
    return out


def sls_pool(table: EmbeddingTable, indices) -> np.ndarray:
    """Look up ``indices`` in ``table`` and pool them into one float32 vector."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    check_indices(table, idx)
    if table.pooling == CONCAT:
        return table.values[idx].reshape(-1).astype(np.float32)
    if idx.size == 0:
        return np.zeros(table.dim, dtype=np.float32)
    pooled = pool_segments(table.values, idx, np.array([idx.size]))
    return pooled[0].astype(np.float32)


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == RELU:
        return np.maximum(x, 0, out=x)
    return x


def fc_forward(layer: DenseLayer, input) -> np.ndarray:
    x = np.asarray(input, dtype=np.float32)
    if x.ndim != 1 or x.shape[0] != layer.in_dim:
        raise DimensionMismatch(
            f"layer {layer.layer_id}: input length {x.shape} != weight columns {layer.in_dim}"
        )
    return fc_forward_batch(layer, x[None, :])[0]


def fc_forward_batch(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise DimensionMismatch(f"layer {layer.layer_id}: input {x.shape} vs in_dim {layer.in_dim}")
    y = x.astype(np.float32, copy=False) @ layer.weight.T
    y += layer.bias
    return _activate(y, layer.activation)


def sigmoid(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    with np.errstate(over="ignore"):  # exp(-z) -> inf gives the right limit 0
        return (1.0 / (1.0 + np.exp(-z))).astype(np.float32)
