"""Matplotlib figures for analyzer tables. Every figure is written to a file."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analyzer import EMBEDDED_LAYERS, PERCENTILES, STACK_LAYERS  # noqa: E402

_COLORS = {
    "dense_ops": "#4c72b0", "embedded_portion": "#dd8452", "rpc_serde": "#55a868", "rpc_service": "#c44e52",
    "net_overhead": "#8172b3", "sparse_ops": "#dd8452", "remote_net_overhead": "#8172b3",
    "network": "#937860", "main_wait": "#8c8c8c",
}


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def overhead_figure(rows: list[dict], path) -> str:
    """Grouped bars of E2E latency ratio vs. baseline per config and percentile, plus CPU ratio."""
    configs = list(dict.fromkeys(r["config"] for r in rows))
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(configs) + 2), 3.6))
    width = 0.8 / (len(PERCENTILES) + 1)
    x = np.arange(len(configs))
    for i, p in enumerate(PERCENTILES):
        vals = [next((float(r["e2e_ratio"]) for r in rows if r["config"] == c and int(r["percentile"]) == p), np.nan)
                for c in configs]
        ax.bar(x + i * width, vals, width, label=f"P{p} latency")
    cpu = [next((float(r["cpu_ratio"]) for r in rows if r["config"] == c), np.nan) for c in configs]
    ax.bar(x + len(PERCENTILES) * width, cpu, width, label="CPU", color="#333333")
    ax.axhline(1.0, color="k", lw=0.8, ls="--")
    ax.set_xticks(x + width * len(PERCENTILES) / 2)
    ax.set_xticklabels(configs, rotation=30, ha="right")
    ax.set_ylabel("ratio vs. singular")
    ax.legend(fontsize=8, ncol=2)
    return _save(fig, path)


def stack_figure(rows: list[dict], path, keys=STACK_LAYERS, title: str = "") -> str:
    """Stacked bars, one per config, from normalized percentile rows."""
    configs = [r["config"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(configs) + 2), 3.6))
    bottom = np.zeros(len(rows))
    for k in keys:
        vals = np.array([float(r.get(k, 0.0)) for r in rows])
        ax.bar(configs, vals, bottom=bottom, label=k, color=_COLORS.get(k))
        bottom += vals
    ax.set_ylabel("fraction of tallest E2E")
    if title:
        ax.set_title(title, fontsize=10)
    ax.tick_params(axis="x", rotation=30)
    ax.legend(fontsize=7, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    return _save(fig, path)


def embedded_stack_figure(rows: list[dict], path, title: str = "") -> str:
    return stack_figure(rows, path, tuple(f"emb_{k}" for k in EMBEDDED_LAYERS), title)


def rpc_cpu_figure(rows: list[dict], path) -> str:
    """RPC ops per request against aggregate CPU per request, one point per config."""
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    for r in rows:
        ax.scatter(float(r["rpcs_per_request"]), float(r["cpu_ms_per_request"]))
        ax.annotate(r["config"], (float(r["rpcs_per_request"]), float(r["cpu_ms_per_request"])), fontsize=7)
    ax.set_xlabel("RPC ops per request")
    ax.set_ylabel("CPU ms per request (all shards)")
    return _save(fig, path)


def per_shard_figure(rows: list[dict], path) -> str:
    """P50/P99 sparse-op latency per shard."""
    shards = [int(r["shard_id"]) for r in rows]
    labels = ["main" if s < 0 else str(s) for s in shards]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(rows) + 2), 3.4))
    x = np.arange(len(rows))
    for i, p in enumerate((50, 99)):
        ax.bar(x + i * 0.4, [float(r[f"sparse_op_ns_p{p}"]) / 1e6 for r in rows], 0.4, label=f"P{p}")
    ax.set_xticks(x + 0.2)
    ax.set_xticklabels(labels)
    ax.set_xlabel("shard")
    ax.set_ylabel("sparse op ms / request")
    ax.legend(fontsize=8)
    return _save(fig, path)


def line_figure(xs, series: dict[str, list[float]], path, xlabel: str, ylabel: str) -> str:
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    for name, ys in series.items():
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    return _save(fig, path)
