"""Synthetic backbone traffic with planted correlation clusters.

Each link series is

    base * (1 + trend + daily + weekly + loading * latent[cluster]) + noise

clipped at zero.  Daily and weekly phases are shared within a cluster (with a
small per-link jitter) and spread evenly across clusters, and every cluster
owns a slowly varying AR(1) latent factor.  Links are the arcs of a strongly
connected random digraph; clusters are contiguous along its backbone cycle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .data import DAY, WEEK, NetworkMTS, save_csv
from .errors import ArgumentError
from .graph import ClusterAssignment, LineDigraph, line_digraph

START = pd.Timestamp("2024-01-01T00:00:00Z")


@dataclass(frozen=True)
class SynthResult:
    data: NetworkMTS
    ground_truth: ClusterAssignment
    graph: LineDigraph
    network_arcs: tuple[tuple[str, str], ...]
    seed: int

    def __iter__(self):
        return iter((self.data, self.ground_truth, self.graph))

    def sidecar(self) -> dict:
        return {
            "link_ids": list(self.data.link_ids),
            "ground_truth_clusters": [int(x) for x in self.ground_truth.labels],
            "graph_arcs": [[int(i), int(j)] for i, j in self.graph.arcs],
            "seed": self.seed,
        }

    def write(self, csv_path: str | Path, sidecar_path: str | Path) -> None:
        save_csv(self.data, csv_path)
        Path(sidecar_path).write_text(json.dumps(self.sidecar(), indent=2) + "\n")


def read_sidecar(path: str | Path) -> tuple[LineDigraph, ClusterAssignment, int]:
    obj = json.loads(Path(path).read_text())
    labels = np.asarray(obj["ground_truth_clusters"], dtype=np.int64)
    graph = LineDigraph(tuple(obj["link_ids"]), tuple(tuple(a) for a in obj["graph_arcs"]))
    truth = ClusterAssignment(k=int(labels.max()) + 1, labels=labels)
    return graph, truth, int(obj["seed"])


def _network(n_links: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    n_nodes = max(2, n_links // 2)
    while n_nodes * (n_nodes - 1) < n_links:
        n_nodes += 1
    n_nodes = min(n_nodes, n_links)
    arcs = [(i, (i + 1) % n_nodes) for i in range(n_nodes)]
    present = set(arcs)
    while len(arcs) < n_links:
        u, v = (int(x) for x in rng.integers(0, n_nodes, size=2))
        if u != v and (u, v) not in present:
            present.add((u, v))
            arcs.append((u, v))
    return sorted(arcs)


def _ar1(n: int, phi: float, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal(n)
    out = np.empty(n)
    out[0] = eps[0]
    scale = np.sqrt(1 - phi * phi)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + scale * eps[t]
    return (out - out.mean()) / out.std()


def synth_generate(
    n_links: int,
    n_hours: int,
    n_latent_clusters: int,
    seed: int,
    noise: float = 0.08,
) -> SynthResult:
    """Deterministic synthetic network dataset.

    ``noise`` is the Gaussian noise standard deviation relative to each
    link's baseline volume.
    """
    if n_links < 2:
        raise ArgumentError(f"n_links must be >= 2, got {n_links}")
    if n_hours < 2 * WEEK:
        raise ArgumentError(f"n_hours must be >= {2 * WEEK}, got {n_hours}")
    if not 1 <= n_latent_clusters <= n_links:
        raise ArgumentError(f"n_latent_clusters must lie in [1, {n_links}], got {n_latent_clusters}")
    if noise < 0:
        raise ArgumentError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    k = n_latent_clusters

    arcs = _network(n_links, rng)
    labels = np.arange(n_links) * k // n_links

    t = np.arange(n_hours, dtype=np.float64)
    u = t / n_hours
    offset = rng.uniform(0, 2 * np.pi, size=2)
    daily_phase = offset[0] + 2 * np.pi * np.arange(k) / k
    weekly_phase = offset[1] + 2 * np.pi * rng.permutation(k) / k
    latent = np.stack([_ar1(n_hours, 0.97, rng) for _ in range(k)])

    base = 40.0 * np.exp(rng.normal(0.0, 0.8, size=n_links))
    daily_amp = rng.uniform(0.25, 0.45, size=n_links)
    weekly_amp = rng.uniform(0.08, 0.18, size=n_links)
    loading = rng.uniform(0.15, 0.3, size=n_links)
    trend_lin = rng.uniform(-0.15, 0.15, size=n_links)
    trend_bow = rng.uniform(-0.1, 0.1, size=n_links)
    jitter = rng.normal(0.0, 0.15, size=(2, n_links))

    values = np.empty((n_hours, n_links))
    for n in range(n_links):
        c = labels[n]
        trend = trend_lin[n] * u + trend_bow[n] * np.sin(np.pi * u)
        daily = daily_amp[n] * np.sin(2 * np.pi * t / DAY + daily_phase[c] + jitter[0, n])
        weekly = weekly_amp[n] * np.sin(2 * np.pi * t / WEEK + weekly_phase[c] + jitter[1, n])
        shape = 1.0 + trend + daily + weekly + loading[n] * latent[c]
        values[:, n] = base[n] * shape + noise * base[n] * rng.standard_normal(n_hours)
    values = np.clip(values, 0.0, None)

    names = [f"r{u:02d}" for u in range(max(max(a) for a in arcs) + 1)]
    network_arcs = tuple((names[a], names[b]) for a, b in arcs)
    graph = line_digraph(network_arcs)
    data = NetworkMTS(
        timestamps=pd.date_range(START, periods=n_hours, freq="h"),
        link_ids=graph.node_ids,
        values=values,
        metadata={"unit": "Mbps", "generator": "synth", "seed": str(seed)},
    )
    truth = ClusterAssignment(k=k, labels=labels)
    return SynthResult(data, truth, graph, network_arcs, seed)
