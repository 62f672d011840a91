"""Launch a main shard and k sparse shards as local processes.

Each process binds port 0 and reports the address it got through a ready
file, so there is no window where a pre-picked free port can be stolen.
Sparse shards start first; the main shard starts once their addresses are
known and written into the topology file.
"""

from __future__ import annotations

import os
import signal
import subprocess
import sys
import time
from pathlib import Path

from .errors import ShardUnavailable
from .planner import load_plan
from .transport import MainClient, Topology


def write_deployments(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for model, plan in pairs:
            f.write(f"{model}\t{plan}\n")


def read_deployments(path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line and not line.startswith("#"):
                model, plan = line.split("\t")
                out.append((model, plan))
    return out


class LocalCluster:
    """Context manager around 1 + k serving processes on loopback."""

    def __init__(self, workdir, deployments: list[tuple[str, str]], num_shards: int, rpc_delay_ms: float = 0.0,
                 trace: bool = True, workers: int | None = None, rpc_deadline: float = 5.0,
                 host: str = "127.0.0.1"):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.deployments = [(str(m), str(p)) for m, p in deployments]
        self.num_shards = num_shards
        self.rpc_delay_ms = rpc_delay_ms
        self.trace = trace
        self.workers = workers
        self.rpc_deadline = rpc_deadline
        self.host = host
        self.procs: dict[int, subprocess.Popen] = {}
        self.topology: Topology | None = None
        self.topology_path = self.workdir / "topology.txt"
        self._plan_shards = {p: load_plan(p).num_sparse_shards for _, p in self.deployments}

    # ------------------------------------------------------------------

    def trace_path(self, shard_id: int) -> Path:
        name = "main" if shard_id < 0 else f"shard{shard_id}"
        return self.workdir / f"trace-{name}.ndjson"

    def trace_paths(self) -> list[Path]:
        return [self.trace_path(s) for s in sorted(self.procs) if self.trace_path(s).exists()]

    def _launch(self, shard_id: int, pairs, topology_path: Path) -> Path:
        ready = self.workdir / f"ready-{shard_id}"
        if ready.exists():
            ready.unlink()
        dep_file = self.workdir / f"deployments-{shard_id}.tsv"
        write_deployments(dep_file, pairs)
        cmd = [sys.executable, "-m", "recshard", "serve",
               "--role", "main" if shard_id < 0 else "sparse", "--shard-id", str(shard_id),
               "--deployments", str(dep_file), "--topology", str(topology_path),
               "--listen", f"{self.host}:0", "--ready-file", str(ready),
               "--rpc-deadline", str(self.rpc_deadline)]
        if self.trace:
            cmd += ["--trace", str(self.trace_path(shard_id))]
        if self.workers:
            cmd += ["--workers", str(self.workers)]
        log = open(self.workdir / f"serve-{shard_id}.log", "w")
        self.procs[shard_id] = subprocess.Popen(cmd, stdout=log, stderr=subprocess.STDOUT,
                                                env={**os.environ, "PYTHONUNBUFFERED": "1"})
        log.close()
        return ready

    def _await_ready(self, shard_id: int, ready: Path, deadline: float) -> tuple[str, int]:
        while time.monotonic() < deadline:
            if ready.exists():
                text = ready.read_text().strip()
                if text:
                    host, port = text.rsplit(":", 1)
                    return host, int(port)
            if self.procs[shard_id].poll() is not None:
                log = (self.workdir / f"serve-{shard_id}.log").read_text()[-2000:]
                raise ShardUnavailable(shard_id, f"exited during startup:\n{log}")
            time.sleep(0.02)
        raise ShardUnavailable(shard_id, "startup timed out")

    def start(self, timeout: float = 120.0) -> "LocalCluster":
        deadline = time.monotonic() + timeout
        boot = Topology((self.host, 0), {s: (self.host, 0) for s in range(self.num_shards)}, self.rpc_delay_ms)
        boot_path = self.workdir / "topology-boot.txt"
        boot.save(boot_path)
        ready = {}
        for s in range(self.num_shards):
            pairs = [(m, p) for m, p in self.deployments if self._plan_shards[p] > s]
            if pairs:
                ready[s] = self._launch(s, pairs, boot_path)
        shards = {}
        for s in range(self.num_shards):
            shards[s] = self._await_ready(s, ready[s], deadline) if s in ready else (self.host, 1)
        topo = Topology((self.host, 0), shards, self.rpc_delay_ms)
        topo.save(self.topology_path)
        r = self._launch(-1, self.deployments, self.topology_path)
        topo.main = self._await_ready(-1, r, deadline)
        topo.save(self.topology_path)
        self.topology = topo
        return self

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.topology.main

    def client(self, timeout: float = 60.0) -> MainClient:
        return MainClient(self.endpoint, timeout=timeout)

    def kill_shard(self, shard_id: int) -> None:
        p = self.procs.get(shard_id)
        if p is not None and p.poll() is None:
            p.kill()
            p.wait()

    def stop(self, timeout: float = 30.0) -> dict[int, int]:
        """SIGTERM everything (main first so it drains before its shards go) and wait."""
        codes = {}
        order = [-1] + sorted(s for s in self.procs if s >= 0)
        for s in order:
            p = self.procs.get(s)
            if p is None:
                continue
            if p.poll() is None:
                p.send_signal(signal.SIGTERM)
                try:
                    p.wait(timeout)
                except subprocess.TimeoutExpired:
                    p.kill()
                    p.wait()
            codes[s] = p.returncode
        return codes

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
