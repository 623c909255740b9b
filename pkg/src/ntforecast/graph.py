"""Line digraphs, k-hop adjacency and correlation clustering of link series."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import NetworkMTS, RowRange
from .errors import ArgumentError

AdjacencyMode = Literal["directed", "symmetric"]


@dataclass(frozen=True)
class LineDigraph:
    """Links as nodes; arc ``(i, j)`` means link ``i`` feeds link ``j``."""

    node_ids: tuple[str, ...]
    arcs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        n = len(self.node_ids)
        seen = set()
        for i, j in self.arcs:
            if not (0 <= i < n and 0 <= j < n):
                raise ArgumentError(f"arc ({i}, {j}) out of range for {n} nodes")
            if i == j:
                raise ArgumentError(f"self-arc at node {i}")
            if (i, j) in seen:
                raise ArgumentError(f"duplicate arc ({i}, {j})")
            seen.add((i, j))

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for i, j in self.arcs:
            a[i, j] = True
        return a

    def permuted(self, perm: Sequence[int]) -> LineDigraph:
        """Relabel so that new node ``k`` is old node ``perm[k]``."""
        inv = {old: new for new, old in enumerate(perm)}
        return LineDigraph(
            tuple(self.node_ids[p] for p in perm),
            tuple(sorted((inv[i], inv[j]) for i, j in self.arcs)),
        )


def link_id(u, v) -> str:
    return f"{u}->{v}"


def line_digraph(arcs: Iterable[tuple]) -> LineDigraph:
    """Line digraph of a directed network given as ``(tail, head)`` pairs.

    Output nodes follow the order of ``arcs``.
    """
    arcs = [tuple(a) for a in arcs]
    if not arcs:
        raise ArgumentError("network has no arcs")
    if len(set(arcs)) != len(arcs):
        raise ArgumentError("network has duplicate arcs")
    by_tail: dict = {}
    for idx, (u, _) in enumerate(arcs):
        by_tail.setdefault(u, []).append(idx)
    out = []
    for a, (_, head) in enumerate(arcs):
        for b in by_tail.get(head, ()):
            if a != b:
                out.append((a, b))
    return LineDigraph(tuple(link_id(u, v) for u, v in arcs), tuple(sorted(out)))


@dataclass(frozen=True, eq=False)
class AdjacencySpec:
    mode: AdjacencyMode
    hops: int
    include_self_loops: bool
    matrix: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    def edge_list(self, node_ids: Sequence[str] | None = None) -> str:
        """One ``src<TAB>dst`` line per true entry, row-major."""
        lines = [f"# mode={self.mode} hops={self.hops} self_loops={self.include_self_loops}"]
        for i, j in zip(*np.nonzero(self.matrix)):
            if node_ids is None:
                lines.append(f"{i}\t{j}")
            else:
                lines.append(f"{node_ids[i]}\t{node_ids[j]}")
        return "\n".join(lines) + "\n"


def k_hop_adjacency(
    g: LineDigraph, k: int, mode: AdjacencyMode = "directed", self_loops: bool = True
) -> AdjacencySpec:
    """Boolean reachability within ``k`` steps."""
    if k < 1:
        raise ArgumentError(f"hops must be >= 1, got {k}")
    if mode not in ("directed", "symmetric"):
        raise ArgumentError(f"unknown adjacency mode {mode!r}")
    step = g.adjacency()
    if mode == "symmetric":
        step = step | step.T
    step_i = step.astype(np.int64)
    reach = step.copy()
    frontier = step.copy()
    for _ in range(k - 1):
        frontier = (frontier.astype(np.int64) @ step_i) > 0
        new = reach | frontier
        if np.array_equal(new, reach):
            break
        reach = new
    np.fill_diagonal(reach, self_loops)
    reach.setflags(write=False)
    return AdjacencySpec(mode=mode, hops=k, include_self_loops=self_loops, matrix=reach)


# ---------------------------------------------------------------------------
# Correlation


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    method: Literal["spearman", "pearson"]
    rho: np.ndarray
    link_ids: tuple[str, ...] = ()
    rows: RowRange | None = None


def _unpack(data) -> tuple[np.ndarray, tuple[str, ...], RowRange | None]:
    if isinstance(data, NetworkMTS):
        return data.values, data.link_ids, data.rows
    values = np.asarray(data, dtype=np.float64)
    if values.ndim != 2:
        raise ArgumentError("expected a T x N matrix")
    return values, tuple(str(i) for i in range(values.shape[1])), None


def _pearson_columns(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    norms = np.sqrt((xc * xc).sum(axis=0))
    constant = norms == 0
    norms = np.where(constant, 1.0, norms)
    z = xc / norms
    rho = z.T @ z
    rho[constant, :] = 0.0
    rho[:, constant] = 0.0
    rho = np.clip((rho + rho.T) / 2, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return rho


def pearson_matrix(data) -> CorrelationMatrix:
    values, ids, rows = _unpack(data)
    if values.shape[0] < 3:
        raise ArgumentError("correlation needs at least 3 time steps")
    return CorrelationMatrix("pearson", _pearson_columns(values), ids, rows)


def spearman_matrix(data) -> CorrelationMatrix:
    """Pearson correlation of average-rank transforms."""
    values, ids, rows = _unpack(data)
    if values.shape[0] < 3:
        raise ArgumentError("correlation needs at least 3 time steps")
    ranks = rankdata(values, method="average", axis=0)
    return CorrelationMatrix("spearman", _pearson_columns(ranks), ids, rows)


def correlation_matrix(data, method: str) -> CorrelationMatrix:
    if method == "spearman":
        return spearman_matrix(data)
    if method == "pearson":
        return pearson_matrix(data)
    raise ArgumentError(f"unknown correlation method {method!r}")


# ---------------------------------------------------------------------------
# Clustering


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Partition of N series into ``k`` non-empty clusters.

    ``rows`` is the row fingerprint of the correlation the partition was
    derived from (``None`` for ground truth or hand-built assignments).
    """

    k: int
    labels: np.ndarray
    rows: RowRange | None = None
    method: str | None = None

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ArgumentError("labels must be 1-D")
        if self.k < 1 or np.any(labels < 0) or np.any(labels >= self.k):
            raise ArgumentError(f"labels must lie in [0, {self.k})")
        if len(np.unique(labels)) != self.k:
            raise ArgumentError(f"every one of the {self.k} clusters must be non-empty")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_series(self) -> int:
        return len(self.labels)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def to_json(self) -> str:
        return json.dumps({"k": int(self.k), "labels": [int(x) for x in self.labels]})

    @classmethod
    def from_json(cls, text: str) -> ClusterAssignment:
        obj = json.loads(text)
        return cls(k=int(obj["k"]), labels=np.asarray(obj["labels"], dtype=np.int64))


def cluster_series(corr: CorrelationMatrix, k: int) -> ClusterAssignment:
    """Average-linkage agglomerative clustering on ``1 - rho``.

    Among equally close cluster pairs the one whose smallest member indices
    are lexicographically lowest merges first. Labels are numbered by each
    cluster's smallest member.
    """
    rho = np.asarray(corr.rho, dtype=np.float64)
    n = rho.shape[0]
    if not 1 <= k <= n:
        raise ArgumentError(f"k must lie in [1, {n}], got {k}")
    dist = 1.0 - rho
    np.fill_diagonal(dist, np.inf)
    # slot i holds the cluster whose smallest member is i
    active = np.ones(n, dtype=bool)
    sizes = np.ones(n, dtype=np.int64)
    members = {i: [i] for i in range(n)}
    d = dist.copy()
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    for _ in range(n - k):
        masked = np.where(upper & active[:, None] & active[None, :], d, np.inf)
        flat = int(np.argmin(masked))
        a, b = divmod(flat, n)
        na, nb = sizes[a], sizes[b]
        merged = (na * d[a] + nb * d[b]) / (na + nb)
        d[a, :] = merged
        d[:, a] = merged
        d[a, a] = np.inf
        active[b] = False
        sizes[a] = na + nb
        members[a].extend(members.pop(b))
    labels = np.empty(n, dtype=np.int64)
    for c, slot in enumerate(sorted(members)):
        labels[members[slot]] = c
    return ClusterAssignment(k=k, labels=labels, rows=corr.rows, method=corr.method)
