"""Graphs, dynamic graph streams, Laplacians and hybrid time domains."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected 0/1 adjacency without self-loops."""

    adjacency: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got {a.shape}")
        if not np.all((a == 0) | (a == 1)):
            raise GraphError("adjacency entries must be 0 or 1")
        if np.any(np.diag(a) != 0):
            raise GraphError("adjacency diagonal must be zero")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return self.adjacency.shape == other.adjacency.shape and bool(np.all(self.adjacency == other.adjacency))

    def __hash__(self):
        return hash((self.adjacency.shape, self.adjacency.tobytes()))

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def empty(cls, n: int) -> "Graph":
        return cls(np.zeros((n, n)))

    @classmethod
    def from_edges(cls, n: int, edges, symmetric: bool = True) -> "Graph":
        a = np.zeros((n, n))
        for i, j in edges:
            if i == j:
                continue
            a[i, j] = 1.0
            if symmetric:
                a[j, i] = 1.0
        return cls(a)

    def edges(self) -> list[tuple[int, int]]:
        """Upper-triangle edge list ``(i, j)`` with ``i < j``."""
        iu, ju = np.nonzero(np.triu(self.adjacency, 1))
        return [(int(i), int(j)) for i, j in zip(iu, ju)]

    def neighbors(self, v: int) -> list[int]:
        return [int(u) for u in np.nonzero(self.adjacency[v])[0]]

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.adjacency, self.adjacency.T))

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        p = np.asarray(perm)
        return Graph(self.adjacency[np.ix_(p, p)])


def normalized_laplacian(g: Graph | np.ndarray) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``.

    Accepts a :class:`Graph` or a raw adjacency array; a stacked ``(..., n, n)``
    array is normalized slice by slice.
    """
    a = g.adjacency if isinstance(g, Graph) else np.asarray(g, dtype=np.float64)
    n = a.shape[-1]
    a_hat = a + np.eye(n)
    d = a_hat.sum(axis=-1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return inv_sqrt[..., :, None] * a_hat * inv_sqrt[..., None, :]


def pairwise_distances(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    diff = p[..., :, None, :] - p[..., None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def nearest_rank_percentile(values, q: float) -> float:
    """Nearest-rank percentile: the ``ceil(q/100 * N)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise GraphError("percentile of an empty set")
    rank = max(1, int(math.ceil(q / 100.0 * v.size)))
    return float(v[rank - 1])


def distance_threshold_adjacency(
    points, radius: float | None = None, percentile: float | None = None
) -> Graph:
    """Threshold pairwise distances into an undirected graph.

    ``radius=r`` links ``i != j`` when ``2 * |x_i - x_j| <= r``.
    ``percentile=q`` links pairs strictly closer than the nearest-rank
    ``q``-th percentile of the upper-triangle distances.
    """
    if (radius is None) == (percentile is None):
        raise GraphError("give exactly one of radius or percentile")
    p = np.asarray(points, dtype=np.float64)
    if p.shape[0] < 2:
        raise GraphError("need at least two points")
    dist = pairwise_distances(p)
    n = dist.shape[0]
    off_diag = ~np.eye(n, dtype=bool)
    if radius is not None:
        if radius <= 0:
            raise GraphError(f"radius must be positive, got {radius}")
        adj = (2.0 * dist <= radius) & off_diag
    else:
        if not 0.0 < percentile < 100.0:
            raise GraphError(f"percentile must lie in (0, 100), got {percentile}")
        upper = dist[np.triu_indices(n, 1)]
        if np.all(upper == 0.0):
            raise GraphError("all points coincide; the percentile threshold is degenerate")
        tau = nearest_rank_percentile(upper, percentile)
        adj = (dist < tau) & off_diag
    adj = adj | adj.T
    return Graph(adj.astype(np.float64))


def radius_adjacency_batch(positions: np.ndarray, radius: float) -> np.ndarray:
    """Vectorized radius rule for stacked point sets ``(..., n, d)``."""
    dist = pairwise_distances(positions)
    n = dist.shape[-1]
    adj = (2.0 * dist <= radius) & ~np.eye(n, dtype=bool)
    return adj.astype(np.float64)


# --------------------------------------------------------------------------- streams


@dataclass
class DynamicGraphStream:
    """Timestamped sequence of ``(X_t, G_t)`` pairs."""

    timestamps: np.ndarray
    features: list[np.ndarray]
    graphs: list[Graph]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.features) or len(self.features) != len(self.graphs):
            raise GraphError("timestamps, features and graphs must have equal length")
        if len(self.timestamps) and np.any(np.diff(self.timestamps) <= 0):
            bad = int(np.argmax(np.diff(self.timestamps) <= 0)) + 1
            raise GraphError(f"timestamps must be strictly increasing (index {bad})")
        if self.features:
            nx = self.features[0].shape[-1]
            n = self.graphs[0].n
            for k, (x, g) in enumerate(zip(self.features, self.graphs)):
                if x.shape != (n, nx):
                    raise GraphError(f"entry {k}: features {x.shape} do not match ({n}, {nx})")
                if g.n != n:
                    raise GraphError(f"entry {k}: graph has {g.n} nodes, expected {n}")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def n(self) -> int:
        return self.graphs[0].n

    @property
    def nx(self) -> int:
        return self.features[0].shape[-1]

    def feature_array(self) -> np.ndarray:
        return np.stack(self.features)

    def adjacency_array(self) -> np.ndarray:
        return np.stack([g.adjacency for g in self.graphs])

    def segment(self, start: int, stop: int) -> "DynamicGraphStream":
        return DynamicGraphStream(
            self.timestamps[start:stop], self.features[start:stop], self.graphs[start:stop]
        )

    @classmethod
    def constant_graph(cls, timestamps, features, graph: Graph) -> "DynamicGraphStream":
        return cls(np.asarray(timestamps), [np.asarray(x, dtype=np.float64) for x in features],
                   [graph] * len(features))


@dataclass(frozen=True)
class HybridTimeDomain:
    """Ordered intervals ``([t_k, t_{k+1}], k)`` with ``k`` counting from 1."""

    intervals: tuple

    @property
    def span(self) -> tuple[float, float]:
        return self.intervals[0][0][0], self.intervals[-1][0][1]

    def __len__(self) -> int:
        return len(self.intervals)

    def reversed(self) -> list:
        return list(reversed(self.intervals))


def hybrid_time_domain(timestamps) -> HybridTimeDomain:
    t = [float(x) for x in timestamps]
    if len(t) < 2:
        raise GraphError("a hybrid time domain needs at least two timestamps")
    for k in range(1, len(t)):
        if not t[k] > t[k - 1]:
            raise GraphError(f"timestamps must be strictly increasing; index {k} breaks the order")
    return HybridTimeDomain(tuple(((t[k], t[k + 1]), k + 1) for k in range(len(t) - 1)))


@dataclass
class HybridArc:
    """Per-interval flow records plus the (pre, post) state pair at every jump."""

    segments: list = field(default_factory=list)
    jumps: list = field(default_factory=list)
    jump_times: list = field(default_factory=list)

    def post_states(self) -> list:
        return [post for _, post in self.jumps]


# --------------------------------------------------------------------------- edge-list files


def save_edge_list(g: Graph, path) -> None:
    lines = [f"{i} {j}" for i, j in g.edges()]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_edge_list(path, n: int | None = None) -> Graph:
    """Read whitespace-separated 0-based ``i j`` pairs; duplicates and order are ignored."""
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"{path}:{lineno}: expected 'i j', got {line!r}")
        edges.append((int(parts[0]), int(parts[1])))
    size = n if n is not None else (max((max(e) for e in edges), default=-1) + 1)
    return Graph.from_edges(size, set(edges))
