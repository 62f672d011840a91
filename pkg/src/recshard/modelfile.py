"""Model spec file: a UTF-8 key/value header, a delimiter line, raw floats.

Layout::

    recshard-model 1
    model_id <id>
    default_batch_size <n>
    net id=<i> role=<user|candidate> dense_input_dim=<d> tables=<t,..> bottom=<l,..> interaction=<l,..> top=<l,..>
    layer id=<i> net=<n> in=<d> out=<d> activation=<relu|identity>
    table id=<i> net=<n> rows=<N> dim=<M> pooling=<sum|concat> concat_k=<k> pooling_factor=<f|-> size_bytes=<b>
    payload_bytes <total>
    --- payload ---
    <little-endian float32: tables by id (row-major N x M), then layers by id (weight row-major, bias)>

Planner and analyzer only need the header, so loading can memory-map the
payload instead of reading it.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ParseError
from .model import (
    ACTIVATIONS, FLOAT_BYTES, POOLINGS, ROLES, DenseLayer, EmbeddingTable, ModelSpec, Net,
    TableProfile, validate_spec,
)

MAGIC = "recshard-model"
VERSION = 1
DELIMITER = b"--- payload ---\n"
_F32 = np.dtype("<f4")


def _ids(items) -> str:
    return ",".join(str(i) for i in items)


def format_header(spec: ModelSpec) -> str:
    lines = [f"{MAGIC} {VERSION}", f"model_id {spec.model_id}",
             f"default_batch_size {spec.default_batch_size}"]
    for n in spec.nets:
        lines.append(
            f"net id={n.net_id} role={n.role} dense_input_dim={n.dense_input_dim} "
            f"tables={_ids(n.table_ids)} bottom={_ids(n.bottom_layers)} "
            f"interaction={_ids(n.interaction_layers)} top={_ids(n.top_layers)}"
        )
    for l in sorted(spec.layers, key=lambda l: l.layer_id):
        lines.append(f"layer id={l.layer_id} net={l.net_id} in={l.in_dim} out={l.out_dim} "
                     f"activation={l.activation}")
    profiles = {p.table_id: p for p in spec.profiles}
    for t in sorted(spec.tables, key=lambda t: t.table_id):
        p = profiles.get(t.table_id)
        pf = repr(float(p.est_pooling_factor)) if p is not None else "-"
        lines.append(f"table id={t.table_id} net={t.net_id} rows={t.num_rows} dim={t.dim} "
                     f"pooling={t.pooling} concat_k={t.concat_k} pooling_factor={pf} "
                     f"size_bytes={t.size_bytes}")
    total = spec.sparse_bytes + spec.dense_bytes
    lines.append(f"payload_bytes {total}")
    return "\n".join(lines) + "\n"


def save_spec(spec: ModelSpec, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(format_header(spec).encode("utf-8"))
        f.write(DELIMITER)
        for t in sorted(spec.tables, key=lambda t: t.table_id):
            f.write(np.ascontiguousarray(t.values, dtype=_F32).tobytes())
        for l in sorted(spec.layers, key=lambda l: l.layer_id):
            f.write(np.ascontiguousarray(l.weight, dtype=_F32).tobytes())
            f.write(np.ascontiguousarray(l.bias, dtype=_F32).tobytes())
    os.replace(tmp, path)


def _kv(tokens: list[str], lineno: int, keys: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ParseError(f"expected key=value, got {tok!r}", lineno)
        k, v = tok.split("=", 1)
        if k not in keys:
            raise ParseError(f"unknown key {k!r}", lineno, k)
        out[k] = v
    missing = [k for k in keys if k not in out]
    if missing:
        raise ParseError("missing key", lineno, missing[0])
    return out


def _int(value: str, lineno: int, key: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"not an integer: {value!r}", lineno, key) from None


def _id_list(value: str, lineno: int, key: str) -> tuple[int, ...]:
    if value == "":
        return ()
    return tuple(_int(v, lineno, key) for v in value.split(","))


def parse_header(text: str):
    """Parse header text into plain records; raises ParseError with line info."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty header", 1)
    first = lines[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise ParseError(f"not a model file (expected {MAGIC!r})", 1)
    if _int(first[1], 1, "version") != VERSION:
        raise ParseError(f"unsupported version {first[1]}", 1, "version")
    hdr = {"model_id": None, "default_batch_size": None, "payload_bytes": None,
           "nets": [], "layers": [], "tables": []}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        kind, *rest = line.split(" ")
        if kind == "model_id":
            hdr["model_id"] = " ".join(rest)
        elif kind in ("default_batch_size", "payload_bytes"):
            if len(rest) != 1:
                raise ParseError("expected one value", lineno, kind)
            hdr[kind] = _int(rest[0], lineno, kind)
        elif kind == "net":
            kv = _kv(rest, lineno, ("id", "role", "dense_input_dim", "tables", "bottom", "interaction", "top"))
            if kv["role"] not in ROLES:
                raise ParseError(f"unknown role {kv['role']!r}", lineno, "role")
            hdr["nets"].append(Net(
                net_id=_int(kv["id"], lineno, "id"), role=kv["role"],
                dense_input_dim=_int(kv["dense_input_dim"], lineno, "dense_input_dim"),
                table_ids=_id_list(kv["tables"], lineno, "tables"),
                bottom_layers=_id_list(kv["bottom"], lineno, "bottom"),
                interaction_layers=_id_list(kv["interaction"], lineno, "interaction"),
                top_layers=_id_list(kv["top"], lineno, "top"),
            ))
        elif kind == "layer":
            kv = _kv(rest, lineno, ("id", "net", "in", "out", "activation"))
            if kv["activation"] not in ACTIVATIONS:
                raise ParseError(f"unknown activation {kv['activation']!r}", lineno, "activation")
            hdr["layers"].append({k: (v if k == "activation" else _int(v, lineno, k)) for k, v in kv.items()})
        elif kind == "table":
            kv = _kv(rest, lineno, ("id", "net", "rows", "dim", "pooling", "concat_k",
                                    "pooling_factor", "size_bytes"))
            if kv["pooling"] not in POOLINGS:
                raise ParseError(f"unknown pooling {kv['pooling']!r}", lineno, "pooling")
            rec = {k: _int(kv[k], lineno, k) for k in ("id", "net", "rows", "dim", "concat_k", "size_bytes")}
            rec["pooling"] = kv["pooling"]
            if kv["pooling_factor"] == "-":
                rec["pooling_factor"] = None
            else:
                try:
                    rec["pooling_factor"] = float(kv["pooling_factor"])
                except ValueError:
                    raise ParseError("not a number", lineno, "pooling_factor") from None
            if rec["size_bytes"] != rec["rows"] * rec["dim"] * FLOAT_BYTES:
                raise ParseError("size_bytes disagrees with rows x dim x 4", lineno, "size_bytes")
            hdr["tables"].append(rec)
        else:
            raise ParseError(f"unknown record {kind!r}", lineno)
    for key in ("model_id", "default_batch_size", "payload_bytes"):
        if hdr[key] is None:
            raise ParseError("missing header entry", None, key)
    return hdr


def load_spec(path, mmap: bool = False, validate: bool = True) -> ModelSpec:
    """Load a model file. ``mmap=True`` maps table payloads lazily (read-only)."""
    with open(path, "rb") as f:
        raw_header = bytearray()
        while True:
            line = f.readline()
            if not line:
                raise ParseError("truncated file: payload delimiter not found",
                                 raw_header.count(b"\n") + 1)
            if line == DELIMITER:
                break
            raw_header += line
        offset = f.tell()
        try:
            text = raw_header.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"header is not UTF-8: {exc}") from None
        hdr = parse_header(text)
        file_size = os.fstat(f.fileno()).st_size
        expected = sum(t["size_bytes"] for t in hdr["tables"]) + sum(
            (l["out"] * l["in"] + l["out"]) * FLOAT_BYTES for l in hdr["layers"])
        if expected != hdr["payload_bytes"]:
            raise ParseError("payload_bytes disagrees with declared shapes", None, "payload_bytes")
        if file_size - offset != expected:
            raise ParseError(
                f"payload is {file_size - offset} bytes, header declares {expected}", None, "payload")

        tables = []
        pos = offset
        for rec in sorted(hdr["tables"], key=lambda r: r["id"]):
            shape = (rec["rows"], rec["dim"])
            if mmap:
                values = np.memmap(path, dtype=_F32, mode="r", offset=pos, shape=shape)
            else:
                f.seek(pos)
                values = np.frombuffer(f.read(rec["size_bytes"]), dtype=_F32).reshape(shape)
            values = values.view(np.ndarray) if mmap else values
            tables.append(EmbeddingTable(
                table_id=rec["id"], net_id=rec["net"], num_rows=rec["rows"], dim=rec["dim"],
                values=values, pooling=rec["pooling"], concat_k=rec["concat_k"]))
            pos += rec["size_bytes"]
        layers = []
        f.seek(pos)
        for rec in sorted(hdr["layers"], key=lambda r: r["id"]):
            w = np.frombuffer(f.read(rec["out"] * rec["in"] * FLOAT_BYTES), dtype=_F32)
            b = np.frombuffer(f.read(rec["out"] * FLOAT_BYTES), dtype=_F32)
            layers.append(DenseLayer(layer_id=rec["id"], net_id=rec["net"],
                                     weight=w.reshape(rec["out"], rec["in"]), bias=b,
                                     activation=rec["activation"]))
    profiles = tuple(
        TableProfile(rec["id"], rec["pooling_factor"], rec["size_bytes"])
        for rec in sorted(hdr["tables"], key=lambda r: r["id"]) if rec["pooling_factor"] is not None
    )
    spec = ModelSpec(model_id=hdr["model_id"], nets=tuple(hdr["nets"]), tables=tuple(tables),
                     layers=tuple(layers), default_batch_size=hdr["default_batch_size"],
                     profiles=profiles)
    if validate:
        validate_spec(spec)
    return spec
