"""Synthetic datasets: particle systems, a stochastic repressilator, irregular
streams by Bernoulli undersampling, a traffic-like sensor network, and a
two-community node-classification graph.  Plus CSV/edge-list dataset IO.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import (
    DynamicGraphStream,
    Graph,
    distance_threshold_adjacency,
    load_edge_list,
    normalized_laplacian,
    pairwise_distances,
    save_edge_list,
)
from .numerics import RngStream
from .solvers import Trajectory


# --------------------------------------------------------------------------- particles


class CollisionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParticleParams:
    n: int = 10
    alpha: float = 1.0
    beta: float = 0.5
    r: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one particle")
        if self.alpha <= 0 or self.beta < 0 or self.r <= 0:
            raise ValueError("alpha and r must be positive, beta nonnegative")


@dataclass
class ParticleRollout:
    """States ``(N+1, n, 4)`` as ``[x, y, vx, vy]`` per node and adjacency per step."""

    times: np.ndarray
    states: np.ndarray
    adjacency: np.ndarray
    params: ParticleParams

    def __len__(self) -> int:
        return len(self.times)

    def trajectory(self) -> Trajectory:
        return Trajectory(list(self.times), list(self.states), 0)

    def stream(self) -> DynamicGraphStream:
        return DynamicGraphStream(self.times, list(self.states), [Graph(a) for a in self.adjacency])

    def graph(self, k: int) -> Graph:
        return Graph(self.adjacency[k])


def initial_particle_state(p: ParticleParams, rng: RngStream, half_width: float = 2.0,
                           min_sep: float = 1e-3) -> np.ndarray:
    """Uniform positions in ``[-w, w]^2`` with no pair closer than ``min_sep``; zero velocity."""
    for _ in range(10_000):
        pos = rng.uniform(-half_width, half_width, size=(p.n, 2))
        d = pairwise_distances(pos) + np.eye(p.n) * 1e9
        if p.n == 1 or d.min() >= min_sep:
            return np.concatenate([pos, np.zeros((p.n, 2))], axis=1)
    raise RuntimeError("could not place particles without overlap")


def pair_forces(state: np.ndarray, adjacency: np.ndarray, p: ParticleParams) -> np.ndarray:
    """``F[i, j] = f_ij`` for linked pairs (zero elsewhere), shape ``(n, n, 2)``.

    ``f_ij = [alpha (|d| - r) + beta <v_i - v_j, n_ij>] n_ij`` with
    ``d = x_i - x_j`` and ``n_ij = d / |d|``; every factor flips sign exactly
    under ``i <-> j``, so ``f_ji = -f_ij`` bit for bit.
    """
    pos, vel = state[:, :2], state[:, 2:]
    d = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(d * d, axis=-1))
    linked = adjacency > 0
    if np.any(dist[linked] < 1e-9):
        i, j = np.argwhere(linked & (dist < 1e-9))[0]
        raise CollisionError(f"particles {i} and {j} collided")
    safe = np.where(linked, dist, 1.0)
    unit = d / safe[..., None]
    dv = vel[:, None, :] - vel[None, :, :]
    mag = p.alpha * (dist - p.r) + p.beta * np.sum(dv * unit, axis=-1)
    return np.where(linked[..., None], mag[..., None] * unit, 0.0)


def particle_field(state: np.ndarray, adjacency: np.ndarray, p: ParticleParams) -> np.ndarray:
    """``d/dt [x, v] = [v, -x - sum_j f_ij]``."""
    acc = -state[:, :2] - pair_forces(state, adjacency, p).sum(axis=1)
    return np.concatenate([state[:, 2:], acc], axis=1)


def particle_energy(state: np.ndarray, adjacency: np.ndarray, p: ParticleParams) -> float:
    """Kinetic + harmonic trap energy plus spring energy over linked pairs."""
    pos, vel = state[:, :2], state[:, 2:]
    e = 0.5 * float(np.sum(vel * vel) + np.sum(pos * pos))
    dist = pairwise_distances(pos)
    iu = np.triu_indices(p.n, 1)
    linked = adjacency[iu] > 0
    e += 0.5 * p.alpha * float(np.sum((dist[iu][linked] - p.r) ** 2))
    return e


def simulate_multi_particle(p: ParticleParams, T: float = 5.0, dt: float = 1.95e-3,
                            rng: RngStream | None = None, Z_init=None) -> ParticleRollout:
    """RK4 rollout with ``floor(T/dt)`` steps of exactly ``dt``.

    The neighborhood ``2|x_i - x_j| <= r`` is rebuilt at the start of every
    step and held fixed through the step's stages.
    """
    if Z_init is None:
        Z_init = initial_particle_state(p, rng or RngStream(0))
    Z = np.array(Z_init, dtype=np.float64)
    if Z.shape != (p.n, 4):
        raise ValueError(f"initial state must be ({p.n}, 4), got {Z.shape}")
    if p.n > 1 and np.min(pairwise_distances(Z[:, :2]) + np.eye(p.n) * 1e9) < 1e-9:
        raise CollisionError("initial positions must be pairwise distinct")
    n_steps = int(math.floor(T / dt + 1e-9))
    states = np.empty((n_steps + 1, p.n, 4))
    adjs = np.empty((n_steps + 1, p.n, p.n))
    states[0] = Z
    for k in range(n_steps + 1):
        A = _radius_adjacency(Z, p)
        adjs[k] = A
        if k == n_steps:
            break
        k1 = particle_field(Z, A, p)
        k2 = particle_field(Z + 0.5 * dt * k1, A, p)
        k3 = particle_field(Z + 0.5 * dt * k2, A, p)
        k4 = particle_field(Z + dt * k3, A, p)
        Z = Z + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        states[k + 1] = Z
    times = dt * np.arange(n_steps + 1)
    return ParticleRollout(times, states, adjs, p)


def _radius_adjacency(Z, p: ParticleParams) -> np.ndarray:
    if p.n == 1:
        return np.zeros((1, 1))
    return distance_threshold_adjacency(Z[:, :2], radius=p.r).adjacency.copy()


# --------------------------------------------------------------------------- reaction networks


@dataclass(frozen=True)
class ReactionNetwork:
    """Species counts and reactions ``(name, stoichiometry, propensity)``.

    ``propensity(state)`` takes ``(..., n_species)`` counts and returns ``(...)``.
    """

    species: tuple
    reactions: tuple
    initial: tuple

    @property
    def stoichiometry(self) -> np.ndarray:
        return np.array([r[1] for r in self.reactions], dtype=np.int64)

    def propensities(self, state) -> np.ndarray:
        x = np.asarray(state, dtype=np.float64)
        return np.stack([np.maximum(r[2](x), 0.0) for r in self.reactions], axis=-1)

    def rates(self, state) -> np.ndarray:
        """Mean-field time derivative ``S^T a(x)``."""
        return self.propensities(state) @ self.stoichiometry.astype(np.float64)


@dataclass(frozen=True)
class RepressilatorKinetics:
    """Rate constants per second.

    The defaults scale ``alpha0 = 0.03``, ``alpha = 30``, ``K = 40`` by a system
    size of 4 and use ``k_t = 2``: copy numbers stay high enough that the
    ensemble mean follows the rate equations, and the period is about 130 s.
    """

    alpha0: float = 0.12
    alpha: float = 120.0
    K: float = 160.0
    hill: float = 2.0
    k_t: float = 2.0
    d_m: float = 0.35
    d_p: float = 0.035


REPRESSILATOR_SPECIES = ("LacI", "TetR", "cI", "mLacI", "mTetR", "mcI")
REPRESSILATOR_INITIAL = (0, 0, 0, 0, 20, 0)


def repressilator_network(k: RepressilatorKinetics = RepressilatorKinetics(),
                          initial=REPRESSILATOR_INITIAL) -> ReactionNetwork:
    """Three-gene ring; protein ``i-1`` represses transcription of mRNA ``i``.

    Species order is ``[p1, p2, p3, m1, m2, m3]``.  Reactions, in order:
    transcription ``i`` (x3), translation ``i`` (x3), mRNA decay (x3),
    protein decay (x3).
    """
    reactions = []

    def unit(idx, sign=1):
        s = np.zeros(6, dtype=np.int64)
        s[idx] = sign
        return tuple(s)

    for i in range(3):
        rep = (i - 1) % 3
        reactions.append((f"transcription{i + 1}", unit(3 + i),
                          lambda x, rep=rep: k.alpha0 + k.alpha / (1.0 + (x[..., rep] / k.K) ** k.hill)))
    for i in range(3):
        reactions.append((f"translation{i + 1}", unit(i), lambda x, i=i: k.k_t * x[..., 3 + i]))
    for i in range(3):
        reactions.append((f"mrna_decay{i + 1}", unit(3 + i, -1), lambda x, i=i: k.d_m * x[..., 3 + i]))
    for i in range(3):
        reactions.append((f"protein_decay{i + 1}", unit(i, -1), lambda x, i=i: k.d_p * x[..., i]))
    return ReactionNetwork(REPRESSILATOR_SPECIES, tuple(reactions), tuple(int(v) for v in initial))


def tau_leap(net: ReactionNetwork, T: float = 300.0, tau: float = 0.5, rng: RngStream | None = None,
             n_runs: int = 1, substeps: int = 1):
    """Poisson tau-leaping; returns ``(times, counts)`` with counts ``(n_runs, N+1, n_species)``.

    States are stored every ``tau``; each stored interval is covered by
    ``substeps`` leaps of ``tau / substeps``.  Counts pushed below zero by a
    leap are clamped to zero.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x0 = np.asarray(net.initial, dtype=np.int64)
    if np.any(x0 < 0):
        raise ValueError("initial counts must be nonnegative")
    rng = rng or RngStream(0)
    n_leaps = int(round(T / tau))
    S = net.stoichiometry
    out = np.empty((n_runs, n_leaps + 1, len(x0)), dtype=np.int64)
    x = np.broadcast_to(x0, (n_runs, len(x0))).copy()
    out[:, 0] = x
    h = tau / int(substeps)
    for k in range(n_leaps):
        for _ in range(int(substeps)):
            fired = rng.poisson(net.propensities(x) * h)
            x = np.maximum(x + fired @ S, 0)
        out[:, k + 1] = x
    return tau * np.arange(n_leaps + 1), out


def tau_leap_repressilator(net: ReactionNetwork | None = None, T: float = 300.0, tau: float = 0.5,
                           rng: RngStream | None = None, n_runs: int = 1, substeps: int = 10):
    return tau_leap(net or repressilator_network(), T, tau, rng, n_runs, substeps)


def mean_field(net: ReactionNetwork, T: float, dt: float = 0.05):
    """RK4 on ``dx/dt = S^T a(x)`` from the network's initial counts."""
    n = int(round(T / dt))
    x = np.asarray(net.initial, dtype=np.float64)
    out = np.empty((n + 1, x.size))
    out[0] = x
    for k in range(n):
        k1 = net.rates(x)
        k2 = net.rates(x + 0.5 * dt * k1)
        k3 = net.rates(x + 0.5 * dt * k2)
        k4 = net.rates(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = x
    return dt * np.arange(n + 1), out


def first_peak_time(times, series, window: float = 10.0, min_fraction: float = 0.5) -> float:
    """Time of the first peak of ``series``.

    The first sample that is the maximum of its ``+-window`` neighborhood and
    reaches ``min_fraction`` of the global maximum locates the peak; the vertex
    of a least-squares parabola over that neighborhood refines it, which keeps
    the estimate stable on flat-topped peaks.
    """
    t = np.asarray(times, dtype=np.float64)
    x = np.asarray(series, dtype=np.float64)
    w = max(2, int(round(window / (t[1] - t[0]))))
    floor = min_fraction * x.max()
    for i in range(1, len(x) - 1):
        lo, hi = max(0, i - w), min(len(x), i + w + 1)
        if x[i] >= floor and x[i] == x[lo:hi].max() and hi - i > 1:
            c2, c1, _ = np.polyfit(t[lo:hi] - t[i], x[lo:hi], 2)
            if c2 >= 0:
                return float(t[i])
            return float(t[i] + np.clip(-c1 / (2 * c2), t[lo] - t[i], t[hi - 1] - t[i]))
    raise ValueError("no interior peak found")


def repressilator_graph() -> Graph:
    """Bipartite species/reaction graph: nodes 0-5 species, 6-17 reaction nodes.

    Reaction nodes: transcription ``i`` (6-8) touches ``m_i`` and its repressor
    ``p_{i-1}``; translation ``i`` (9-11) touches ``m_i`` and ``p_i``; decay
    nodes (12-14 mRNA, 15-17 protein) touch one species each.  Every species
    node ends up with three reaction neighbors.
    """
    edges = []
    for i in range(3):
        edges.append((6 + i, 3 + i))
        edges.append((6 + i, (i - 1) % 3))
        edges.append((9 + i, 3 + i))
        edges.append((9 + i, i))
        edges.append((12 + i, 3 + i))
        edges.append((15 + i, i))
    return Graph.from_edges(18, edges)


def minmax_normalize(x, lo=None, hi=None, axis=None):
    """Scale to ``[0, 1]`` per feature; returns ``(scaled, lo, hi)``."""
    x = np.asarray(x, dtype=np.float64)
    if lo is None:
        lo = x.min(axis=axis, keepdims=True)
        hi = x.max(axis=axis, keepdims=True)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return (x - lo) / span, lo, hi


# --------------------------------------------------------------------------- undersampling


@dataclass
class IrregularSeries:
    base_dt: float
    indices: np.ndarray
    timestamps: np.ndarray
    values: np.ndarray


def bernoulli_mask(n: int, keep_prob: float, rng: RngStream) -> np.ndarray:
    """Independent keep decisions; index 0 is always kept."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    mask = rng.random(n) < keep_prob
    if n:
        mask[0] = True
    return mask


def bernoulli_undersample(data, keep_prob: float, rng: RngStream, base_dt: float = 1.0,
                          time_features: bool = False, period: float = 1.0):
    """Keep each grid point independently with probability ``keep_prob``.

    ``data`` is either a regular :class:`DynamicGraphStream` (returns a
    stream) or an array whose first axis is the time grid (returns an
    :class:`IrregularSeries`).  With ``time_features`` each kept node row
    gains ``[dt_prev, sin(2 pi t / period)]``; the first ``dt_prev`` is 0.
    """
    if isinstance(data, DynamicGraphStream):
        mask = bernoulli_mask(len(data), keep_prob, rng)
        idx = np.nonzero(mask)[0]
        ts = data.timestamps[idx]
        feats = [data.features[i] for i in idx]
        if time_features:
            feats = attach_time_features(ts, feats, period)
        return DynamicGraphStream(ts, feats, [data.graphs[i] for i in idx])
    values = np.asarray(data)
    mask = bernoulli_mask(values.shape[0], keep_prob, rng)
    idx = np.nonzero(mask)[0]
    return IrregularSeries(base_dt, idx, base_dt * idx.astype(np.float64), values[idx])


def attach_time_features(timestamps, features, period: float):
    ts = np.asarray(timestamps, dtype=np.float64)
    dts = np.concatenate([[0.0], np.diff(ts)])
    out = []
    for t, dt, x in zip(ts, dts, features):
        n = x.shape[0]
        extra = np.column_stack([np.full(n, dt), np.full(n, math.sin(2 * math.pi * t / period))])
        out.append(np.concatenate([x, extra], axis=1))
    return out


# --------------------------------------------------------------------------- traffic surrogate


@dataclass(frozen=True)
class TrafficParams:
    mean_speed: float = 60.0
    amplitude: float = 12.0
    phase_gradient: float = 0.5
    coupling: float = 0.5
    ar: float = 0.9
    noise: float = 2.0
    measurement_noise: float = 3.0
    percentile: float = 40.0


def synth_traffic(n_stations: int, days: float, base_dt: float, rng: RngStream,
                  params: TrafficParams = TrafficParams()):
    """Regular-grid speed readings on a distance-threshold sensor graph.

    Speed ``= mean + amplitude * sin(2 pi t + phase_i) + dev_i(t) + e_i(t)``
    with ``t`` in days, a phase that varies smoothly across the unit square,
    deviations diffusing over the graph,
    ``dev <- ar * ((1 - coupling) dev + coupling L dev) + noise * eps``,
    and white measurement noise ``e``.  Returns ``(stream, positions)``; node
    features are ``(n, 1)`` speeds.
    """
    if n_stations < 2:
        raise ValueError("need at least two stations")
    pos = rng.uniform(0.0, 1.0, size=(n_stations, 2))
    g = distance_threshold_adjacency(pos, percentile=params.percentile)
    L = normalized_laplacian(g)
    n_steps = int(round(days / base_dt))
    t = base_dt * np.arange(n_steps + 1)
    phase = params.phase_gradient * (pos[:, 0] + pos[:, 1])
    base = params.mean_speed + params.amplitude * np.sin(2 * math.pi * t[:, None] + phase[None, :])
    dev = np.zeros(n_stations)
    devs = np.empty((n_steps + 1, n_stations))
    eps = rng.normal(size=(n_steps + 1, n_stations))
    meas = rng.normal(size=(n_steps + 1, n_stations))
    c = params.coupling
    for k in range(n_steps + 1):
        devs[k] = dev
        dev = params.ar * ((1.0 - c) * dev + c * (L @ dev)) + params.noise * eps[k]
    speed = base + devs + params.measurement_noise * meas
    stream = DynamicGraphStream.constant_graph(t, [s[:, None] for s in speed], g)
    return stream, pos


# --------------------------------------------------------------------------- communities


@dataclass
class NodeClassificationData:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    test_mask: np.ndarray


def two_block_sbm(n_per_block: int, rng: RngStream, p_in: float = 0.1, p_out: float = 0.01,
                  n_features: int = 8, signal: float = 0.5, noise: float = 1.0,
                  train_fraction: float = 0.2) -> NodeClassificationData:
    """Two-community stochastic block model with weakly informative node features."""
    n = 2 * n_per_block
    labels = np.repeat([0, 1], n_per_block)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draws = rng.random((n, n)) < prob
    upper = np.triu(draws, 1)
    adj = (upper | upper.T).astype(np.float64)
    centers = np.zeros((2, n_features))
    centers[0, 0], centers[1, 0] = signal, -signal
    X = centers[labels] + noise * rng.normal(size=(n, n_features))
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    train = np.zeros(n, dtype=bool)
    train[order[:n_train]] = True
    return NodeClassificationData(Graph(adj), X, labels, train, ~train)


# --------------------------------------------------------------------------- dataset IO


def write_stream(directory, stream: DynamicGraphStream, feature_names=None,
                 manifest: dict | None = None) -> Path:
    """Write ``data.csv`` (``t,node,<features>``), edge-list snapshots and a manifest.

    Snapshots are only written when the graph changes; ``adjacency/index.csv``
    maps every time index to its snapshot file.
    """
    d = Path(directory)
    (d / "adjacency").mkdir(parents=True, exist_ok=True)
    names = list(feature_names or [f"x{i}" for i in range(stream.nx)])
    with open(d / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", *names])
        for t, x in zip(stream.timestamps, stream.features):
            for v, row in enumerate(x):
                w.writerow([repr(float(t)), v, *(repr(float(c)) for c in row)])
    index_rows = []
    snap_id = -1
    prev = None
    for k, g in enumerate(stream.graphs):
        if prev is None or not np.array_equal(prev.adjacency, g.adjacency):
            snap_id += 1
            save_edge_list(g, d / "adjacency" / f"snap_{snap_id:05d}.txt")
            prev = g
        index_rows.append((k, f"snap_{snap_id:05d}.txt"))
    with open(d / "adjacency" / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "file"])
        w.writerows(index_rows)
    doc = dict(manifest or {})
    doc["n_nodes"] = stream.n
    doc["features"] = names
    doc["files"] = {p.relative_to(d).as_posix(): _sha256(p) for p in sorted(d.rglob("*"))
                    if p.is_file() and p.name != "manifest.json"}
    (d / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return d


def read_stream(directory) -> DynamicGraphStream:
    d = Path(directory)
    doc = json.loads((d / "manifest.json").read_text())
    n = int(doc["n_nodes"])
    times, rows = [], {}
    with open(d / "data.csv", newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["t", "node"]:
            raise ValueError(f"{d / 'data.csv'}: header must start with t,node")
        for line in r:
            t = float(line[0])
            if not times or times[-1] != t:
                times.append(t)
                rows[t] = np.zeros((n, len(header) - 2))
            rows[t][int(line[1])] = [float(c) for c in line[2:]]
    cache = {}
    graphs = []
    with open(d / "adjacency" / "index.csv", newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for _, name in r:
            if name not in cache:
                cache[name] = load_edge_list(d / "adjacency" / name, n)
            graphs.append(cache[name])
    return DynamicGraphStream(np.array(times), [rows[t] for t in times], graphs)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()
