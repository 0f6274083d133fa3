"""Experiment pipelines: data preparation, model construction, training and
evaluation for the particle, hybrid-forecast, repressilator and community
node-classification tasks.  Every function is deterministic given its seeds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adjoint import (
    TimestampedLoss,
    backprop_value_and_grad,
    finite_difference_grad,
    gde_value_and_grad,
    hybrid_adjoint_grad,
)
from .datagen import (
    ParticleParams,
    RepressilatorKinetics,
    TrafficParams,
    bernoulli_undersample,
    minmax_normalize,
    repressilator_graph,
    repressilator_network,
    simulate_multi_particle,
    synth_traffic,
    tau_leap,
    two_block_sbm,
)
from .graph import radius_adjacency_batch
from .layers import (
    AffineSpec,
    FieldSpec,
    GATLayerSpec,
    GCGRUParams,
    GCNLayerSpec,
    GraphOps,
    ParamStore,
    TemporalConvSpec,
    layer_stack,
    stacked_field_eval,
)
from .models import (
    HybridBatch,
    HybridGDEModel,
    LatentGDEModel,
    NeuralGDEModel,
    elbo_loss,
    gcde_gru_forward,
    gde_forward,
    gsde_decode,
    latent_encode,
)
from .numerics import RngStream
from .solvers import BrownianPath, SolverConfig, integrate_euler_heun
from .training import MetricsLog, ScheduleSpec, extrapolation_rollout, fit, forecast_metrics

# stream ids keep data, initialization and noise draws independent per seed
DATA_STREAM, INIT_STREAM, NOISE_STREAM, SPLIT_STREAM = 1, 2, 3, 4


def mse(pred, target):
    return ad.mean(ad.square(ad.sub(pred, target)))


# =========================================================================== particles


@dataclass
class ParticleData:
    times: np.ndarray
    states: np.ndarray
    adjacency: np.ndarray
    stride: int
    dt: float
    radius: float
    n_train: int

    @property
    def step(self) -> float:
        return self.stride * self.dt

    def pairs(self, split: str):
        """One-step ``(input, adjacency, target)`` arrays for the chosen half."""
        lo, hi = (0, self.n_train) if split == "train" else (self.n_train, len(self.times))
        idx = np.arange(lo, hi - self.stride)
        return self.states[idx], self.adjacency[idx], self.states[idx + self.stride]

    def nominal(self, split: str = "test") -> np.ndarray:
        lo = 0 if split == "train" else self.n_train
        hi = self.n_train if split == "train" else len(self.times)
        return self.states[lo:hi:self.stride]


def particle_data(seed: int, n: int = 10, T: float = 5.0, dt: float = 1.95e-3, stride: int = 10,
                  alpha: float = 1.0, beta: float = 0.5, r: float = 1.0) -> ParticleData:
    p = ParticleParams(n, alpha, beta, r)
    roll = simulate_multi_particle(p, T, dt, RngStream(seed, DATA_STREAM))
    n_train = len(roll.times) // 2
    return ParticleData(roll.times, roll.states, roll.adjacency, stride, dt, r, n_train)


PARTICLE_MODELS = ("gcde", "gcde2", "neural_ode", "static")


@dataclass(frozen=True)
class ParticlePredictor:
    """One-step model ``x(t) -> x(t + step)`` for one of the particle model families."""

    kind: str
    model: object
    step: float
    radius: float
    cfg: SolverConfig

    def predict(self, params, states, adjacency=None):
        X = np.asarray(states)
        batched = X.ndim == 3
        if not batched:
            X = X[None]
        B, n, d = X.shape
        if self.kind == "static":
            out = layer_stack(self.model, X.reshape(B, 1, n * d), None, params).reshape(B, n, d)
        elif self.kind == "neural_ode":
            ops = GraphOps(np.zeros((1, 1)))
            out = gde_forward(self.model, params, X.reshape(B, 1, n * d), ops, [self.step], self.cfg)[0]
            out = np.asarray(out).reshape(B, n, d)
        else:
            if adjacency is None:
                adjacency = radius_adjacency_batch(X[..., :2], self.radius)
            out = np.asarray(gde_forward(self.model, params, X, GraphOps(adjacency), [self.step], self.cfg)[0])
        return out if batched else out[0]

    def value_and_grad(self, params, X, A, Y):
        B, n, d = X.shape
        if self.kind == "static":
            def loss(w):
                return mse(layer_stack(self.model, X.reshape(B, 1, n * d), None, w), Y.reshape(B, 1, n * d))
            return backprop_value_and_grad(loss, params)
        if self.kind == "neural_ode":
            res = gde_value_and_grad(self.model, params, X.reshape(B, 1, n * d), GraphOps(np.zeros((1, 1))),
                                     [self.step], lambda p: mse(p[0], Y.reshape(B, 1, n * d)), self.cfg)
        else:
            res = gde_value_and_grad(self.model, params, X, GraphOps(A), [self.step],
                                     lambda p: mse(p[0], Y), self.cfg)
        return res.value, res.grad


def particle_model(kind: str, n: int, step: float, radius: float, hidden: int = 16,
                   baseline_hidden: int = 64) -> ParticlePredictor:
    cfg = SolverConfig("rk4", h=step)
    span = (0.0, step)
    if kind == "gcde":
        f = FieldSpec([GCNLayerSpec("f.0", 4, hidden, "tanh"), GCNLayerSpec("f.1", hidden, hidden, "tanh"),
                       GCNLayerSpec("f.2", hidden, 4)])
        model = NeuralGDEModel(f, span=span)
    elif kind == "gcde2":
        f = FieldSpec([GCNLayerSpec("f.0", 8, 2 * hidden, "tanh"), GCNLayerSpec("f.1", 2 * hidden, 2 * hidden, "tanh"),
                       GCNLayerSpec("f.2", 2 * hidden, 4)], second_order=True)
        model = NeuralGDEModel(f, span=span)
    elif kind == "neural_ode":
        d = 4 * n
        f = FieldSpec([AffineSpec("f.0", d, baseline_hidden, "tanh"),
                       AffineSpec("f.1", baseline_hidden, baseline_hidden, "tanh"),
                       AffineSpec("f.2", baseline_hidden, d)])
        model = NeuralGDEModel(f, span=span)
    elif kind == "static":
        d = 4 * n
        model = (AffineSpec("s.0", d, baseline_hidden, "tanh"), AffineSpec("s.1", baseline_hidden, baseline_hidden, "tanh"),
                 AffineSpec("s.2", baseline_hidden, d))
    else:
        raise ValueError(f"unknown particle model {kind!r}; expected one of {PARTICLE_MODELS}")
    return ParticlePredictor(kind, model, step, radius, cfg)


def predictor_params(pred: ParticlePredictor, seed: int):
    specs = pred.model if pred.kind == "static" else pred.model.param_specs()
    return ParamStore.build(*specs, rng=RngStream(seed, INIT_STREAM))


def particle_extrapolation(pred: ParticlePredictor, params, nominal, k: int):
    """Self-fed rollouts with the graph rebuilt from predicted positions."""
    return extrapolation_rollout(lambda s, i: pred.predict(params, s), nominal, k)


@dataclass
class ParticleRun:
    kind: str
    seed: int
    losses: list
    mape: dict = field(default_factory=dict)
    params: object = None


def train_particle_model(kind: str, data: ParticleData, seed: int, epochs: int = 200, lr: float = 0.01,
                         ks=(1, 5), log: MetricsLog | None = None, hidden: int = 16,
                         sample_every: int = 2, baseline_hidden: int = 64,
                         schedule: ScheduleSpec | None = None) -> ParticleRun:
    n = data.states.shape[1]
    pred = particle_model(kind, n, data.step, data.radius, hidden, baseline_hidden)
    params = predictor_params(pred, seed)
    X, A, Y = data.pairs("train")
    X, A, Y = X[::sample_every], A[::sample_every], Y[::sample_every]

    def evaluate(p):
        out = {}
        for k in ks:
            _, yh, y = particle_extrapolation(pred, p, data.nominal("test"), k)
            out[f"test_k{k}"] = forecast_metrics(y.reshape(len(y), -1), yh.reshape(len(yh), -1))
        return out

    res = fit(lambda p: pred.value_and_grad(p, X, A, Y), params, epochs, schedule or ScheduleSpec("constant", lr),
              log, evaluate)
    mape = {k: res.evals[-1][f"test_k{k}"].mape_conventional for k in ks}
    return ParticleRun(kind, seed, res.losses, mape, res.params)


# =========================================================================== hybrid forecasting


@dataclass
class TrafficData:
    stream: object
    window: int
    train: HybridBatch
    test: HybridBatch
    train_targets: np.ndarray
    test_targets: np.ndarray
    mean: float
    std: float
    time_unit: float


def traffic_data(seed: int, keep_prob: float = 0.3, n_stations: int = 16, days: float = 14.0,
                 base_dt: float = 1.0 / 48, window: int = 5, train_fraction: float = 0.7,
                 params: TrafficParams = TrafficParams(), time_unit: float = 10.0) -> TrafficData:
    """Irregular windows of ``window`` graphs plus the next reading as target.

    Model time is measured in units of ``time_unit * base_dt``; node features
    are the standardized speed, the gap to the previous reading in model time
    and ``sin(2 pi t / day)``.
    """
    rng = RngStream(seed, DATA_STREAM)
    stream, _ = synth_traffic(n_stations, days, base_dt, rng.child(0), params)
    irr = bernoulli_undersample(stream, keep_prob, rng.child(1))
    times = irr.timestamps / (base_dt * time_unit)
    speed = irr.feature_array()[..., 0]
    n_train_pts = int(train_fraction * len(times))
    mean = float(speed[:n_train_pts].mean())
    std = float(speed[:n_train_pts].std())
    z = (speed - mean) / std
    dts = np.concatenate([[0.0], np.diff(times)])
    enc = np.sin(2 * math.pi * irr.timestamps)
    n = speed.shape[1]
    feats = np.stack([z, np.broadcast_to(dts[:, None], z.shape), np.broadcast_to(enc[:, None], z.shape)], axis=-1)
    starts = np.arange(len(times) - window)
    adj = stream.graphs[0].adjacency
    def batch(idx):
        t = np.stack([times[i : i + window] for i in idx])
        X = np.stack([feats[i : i + window] for i in idx])
        q = np.array([times[i + window] for i in idx])
        return HybridBatch(t, X, np.broadcast_to(adj, (window, n, n)), q)
    tr = starts[starts + window < n_train_pts]
    te = starts[starts + window >= n_train_pts]
    return TrafficData(irr, window, batch(tr), batch(te), z[tr + window][..., None], z[te + window][..., None],
                       mean, std, base_dt * time_unit)


HYBRID_MODELS = ("gcde_gru", "gcgru", "gru")


def hybrid_model(kind: str, nx: int = 3, nz: int = 16) -> HybridGDEModel:
    head = (AffineSpec("y", nz, 1),)
    jump = GCGRUParams("j", nx, nz)
    if kind == "gcde_gru":
        f = FieldSpec([GCNLayerSpec("f.0", nz, nz, "tanh"), GCNLayerSpec("f.1", nz, nz)])
        return HybridGDEModel(jump, head, f)
    if kind in ("gcgru", "gru"):
        return HybridGDEModel(jump, head, None)
    raise ValueError(f"unknown hybrid model {kind!r}; expected one of {HYBRID_MODELS}")


def _graphless(b: HybridBatch) -> HybridBatch:
    return HybridBatch(b.times, b.features, np.zeros_like(b.adjacency), b.query_times)


def hybrid_predictions(m: HybridGDEModel, kind: str, params, data: TrafficData, cfg: SolverConfig | None = None):
    """Test ``(targets, predictions)`` in original speed units, shape ``(B, n)``."""
    cfg = cfg or SolverConfig("dopri5", rtol=1e-4, atol=1e-6)
    test = _graphless(data.test) if kind == "gru" else data.test
    yh = np.asarray(gcde_gru_forward(m, params, test, cfg=cfg).query_prediction)[..., 0]
    y = data.test_targets[..., 0]
    return y * data.std + data.mean, yh * data.std + data.mean


def train_hybrid_model(kind: str, data: TrafficData, seed: int, epochs: int = 40, lr: float = 1e-2,
                       T0: int = 10, log: MetricsLog | None = None, cfg: SolverConfig | None = None,
                       nz: int = 16, schedule: ScheduleSpec | None = None):
    """Returns ``(params, test MetricsReport in original speed units, losses)``."""
    cfg = cfg or SolverConfig("dopri5", rtol=1e-4, atol=1e-6)
    m = hybrid_model(kind, data.train.features.shape[-1], nz)
    params = m.build_params(RngStream(seed, INIT_STREAM))
    train = _graphless(data.train) if kind == "gru" else data.train
    loss = TimestampedLoss.readout_mse(m, train, {"query": data.train_targets})

    def vg(p):
        r = hybrid_adjoint_grad(m, p, train, loss, cfg)
        return r.value, r.grad

    def evaluate(p):
        return {"test": forecast_metrics(*hybrid_predictions(m, kind, p, data, cfg))}

    res = fit(vg, params, epochs, schedule or ScheduleSpec("cosine", lr, 0.0, T0), log, evaluate)
    return res.params, res.evals[-1]["test"], res.losses


# =========================================================================== repressilator


@dataclass
class RepressilatorData:
    times: np.ndarray
    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    split_index: int
    time_scale: float

    def history(self):
        return self.values[:, : self.split_index]

    def future(self):
        return self.values[:, self.split_index :]

    def decode_times(self) -> np.ndarray:
        t = self.times[self.split_index :]
        return (t - t[0]) / self.time_scale

    def select(self, idx) -> "RepressilatorData":
        return replace(self, values=self.values[idx])


def repressilator_data(seed: int, n_traj: int = 10, T: float = 300.0, tau: float = 0.5,
                       every: int = 10, time_scale: float = 50.0, lo=None, hi=None,
                       kinetics: RepressilatorKinetics = RepressilatorKinetics(),
                       n_fit: int | None = None) -> RepressilatorData:
    """Min-max normalized trajectories sampled every ``every * tau`` seconds.

    The first half conditions the encoder; the second half is decoded in
    model time ``(t - t_split) / time_scale``.  Normalization bounds come from
    the first ``n_fit`` trajectories (all of them by default).
    """
    t, counts = tau_leap(repressilator_network(kinetics), T, tau, RngStream(seed, DATA_STREAM), n_traj, 10)
    t, counts = t[::every], counts[:, ::every].astype(np.float64)
    if lo is None or hi is None:
        _, lo, hi = minmax_normalize(counts[: n_fit or n_traj], axis=(0, 1))
    vals, lo, hi = minmax_normalize(counts, lo, hi, axis=(0, 1))
    split = int(np.searchsorted(t, T / 2))
    return RepressilatorData(t, vals, lo, hi, split, time_scale)


def latent_model(hidden: int = 16, sigma_obs: float = 0.1, diffusion_scale: float = 0.1) -> LatentGDEModel:
    g = repressilator_graph()
    drift = FieldSpec([GCNLayerSpec("drift.0", 1, 3, "tanh"), GATLayerSpec("drift.1", 3, 3, "tanh"),
                       GCNLayerSpec("drift.2", 3, 1)])
    diffusion = FieldSpec([GCNLayerSpec("diff.0", 1, 3, "tanh"), GATLayerSpec("diff.1", 3, 3, "tanh"),
                           GCNLayerSpec("diff.2", 3, 1, "sigmoid")])
    enc = (TemporalConvSpec("enc.0", 1, hidden, 3, "relu"), TemporalConvSpec("enc.1", hidden, hidden, 3, "relu"))
    return LatentGDEModel(enc, AffineSpec("q.obs_mean", hidden, 1), AffineSpec("q.obs_logvar", hidden, 1),
                          AffineSpec("q.lat_mean", hidden, 1), AffineSpec("q.lat_logvar", hidden, 1),
                          drift, diffusion, g, tuple(range(6)), sigma_obs, diffusion_scale)


def latent_objective(m: LatentGDEModel, data: RepressilatorData, params, rng: RngStream, cfg: SolverConfig,
                     traj_idx=None):
    """Negative ELBO per trajectory on a fresh posterior sample and Brownian path."""
    hist = data.history() if traj_idx is None else data.history()[traj_idx]
    fut = data.future() if traj_idx is None else data.future()[traj_idx]
    B = hist.shape[0]
    post, Z0 = latent_encode(m, params, hist, rng.child(0))
    t_dec = data.decode_times()
    path = BrownianPath(rng.child(1), (B, m.graph.n, m.nz), 0.0, float(t_dec[-1]))
    preds, _ = gsde_decode(m, params, Z0, t_dec, path, cfg)
    targets = [fut[:, k, :, None] for k in range(len(t_dec))]
    return ad.mul(elbo_loss(preds, targets, post, m.sigma_obs), 1.0 / B)


def train_latent_model(data: RepressilatorData, seed: int, epochs: int = 50, lr: float = 1e-2,
                       log: MetricsLog | None = None, cfg: SolverConfig | None = None,
                       model: LatentGDEModel | None = None, schedule: ScheduleSpec | None = None):
    """Returns ``(model, params, per-epoch losses)``."""
    cfg = cfg or SolverConfig("euler_heun", h=0.1)
    m = model or latent_model()
    params = m.build_params(RngStream(seed, INIT_STREAM))
    noise = RngStream(seed, NOISE_STREAM)
    epoch = [0]

    def vg(p):
        rng = noise.child(epoch[0])
        epoch[0] += 1
        return backprop_value_and_grad(lambda w: latent_objective(m, data, w, rng, cfg), p)

    res = fit(vg, params, epochs, schedule or ScheduleSpec("constant", lr), log, grad_clip=100.0)
    return m, res.params, res.losses


def latent_samples(m: LatentGDEModel, params, data: RepressilatorData, n_samples: int, seed: int,
                   cfg: SolverConfig | None = None, record_attention: bool = False):
    """Decoded samples ``(n_samples, B, T_dec, n_obs)`` and optional attention traces."""
    cfg = cfg or SolverConfig("euler_heun", h=0.1)
    t_dec = data.decode_times()
    hist = data.history()
    out = []
    traces = []
    for s in range(n_samples):
        rng = RngStream(seed, NOISE_STREAM).child(10_000 + s)
        _, Z0 = latent_encode(m, params, hist, rng.child(0))
        path = BrownianPath(rng.child(1), (hist.shape[0], m.graph.n, m.nz), 0.0, float(t_dec[-1]))
        record = [] if (record_attention and s == 0) else None
        preds, _ = gsde_decode(m, params, Z0, t_dec, path, cfg, record=record)
        out.append(np.stack([np.asarray(p)[..., 0] for p in preds], axis=1))
        if record:
            traces = record
    return np.stack(out), traces


# =========================================================================== oversmoothing


def softmax_cross_entropy(logits, labels, mask):
    """Mean cross-entropy over masked nodes; ``logits`` ``(n, c)``."""
    idx = np.nonzero(mask)[0]
    sel = ad.getitem(logits, (idx,))
    shift = sel - np.max(ad.value(sel), axis=-1, keepdims=True)
    logz = ad.log(ad.sum(ad.exp(shift), axis=-1))
    picked = ad.getitem(shift, (np.arange(len(idx)), labels[idx]))
    return ad.mean(ad.sub(logz, picked))


def node_classifier(n_features: int, hidden: int, span: float, n_classes: int = 2) -> NeuralGDEModel:
    f = FieldSpec([GCNLayerSpec("f.0", hidden, hidden, "tanh"), GCNLayerSpec("f.1", hidden, hidden)])
    return NeuralGDEModel(f, (AffineSpec("x", n_features, hidden),), (AffineSpec("y", hidden, n_classes),),
                          (0.0, float(span)))


def train_node_classifier(seed: int, span: float, epochs: int = 100, lr: float = 1e-2, hidden: int = 16,
                          n_per_block: int = 50, h: float = 0.5, data=None, log: MetricsLog | None = None,
                          schedule: ScheduleSpec | None = None):
    """Test accuracy of a GCDE classifier integrated over ``[0, span]`` with RK4."""
    data = data or two_block_sbm(n_per_block, RngStream(seed, DATA_STREAM))
    m = node_classifier(data.features.shape[1], hidden, span)
    params = m.build_params(RngStream(seed, INIT_STREAM))
    cfg = SolverConfig("rk4", h=min(h, span))
    ops = GraphOps(data.graph.adjacency)

    def vg(p):
        r = gde_value_and_grad(m, p, data.features, ops, [span],
                               lambda ys: softmax_cross_entropy(ys[0], data.labels, data.train_mask), cfg)
        return r.value, r.grad

    res = fit(vg, params, epochs, schedule or ScheduleSpec("constant", lr), log)
    logits = np.asarray(gde_forward(m, res.params, data.features, ops, [span], cfg)[0])
    acc = float(np.mean(np.argmax(logits, axis=-1)[data.test_mask] == data.labels[data.test_mask]))
    return acc, res.losses


# =========================================================================== gradient checks


def relative_error(a, b) -> float:
    """``max|a - b| / max|b|`` (``b`` is the reference)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def _path_graph(n: int) -> np.ndarray:
    A = np.zeros((n, n))
    idx = np.arange(n - 1)
    A[idx, idx + 1] = A[idx + 1, idx] = 1.0
    return A


def _check_static(rng: RngStream, second_order: bool):
    n, nx, nz = 4, 2, 3
    width = 2 * nz if second_order else nz
    f = FieldSpec([GCNLayerSpec("f.0", width, 5, "tanh"), GCNLayerSpec("f.1", 5, nz)], second_order=second_order)
    m = NeuralGDEModel(f, (AffineSpec("x", nx, nz),), (AffineSpec("y", nz, 1),), (0.0, 1.0))
    params = m.build_params(rng.child(0))
    X = rng.child(1).normal(size=(n, nx))
    Y = rng.child(2).normal(size=(n, 1))
    ops = GraphOps(_path_graph(n))
    cfg = SolverConfig("dopri5", rtol=1e-10, atol=1e-12)
    t_eval = [0.5, 1.0]

    def loss(ys):
        return ad.add(mse(ys[0], Y), mse(ys[1], Y))

    res = gde_value_and_grad(m, params, X, ops, t_eval, loss, cfg)

    def value(theta):
        return float(ad.value(loss(gde_forward(m, params.with_theta(theta), X, ops, t_eval, cfg))))

    return res.grad, finite_difference_grad(value, params.theta)


def _hybrid_instance(rng: RngStream, K: int):
    n, nx, nz, B = 4, 2, 3, 2
    times = np.cumsum(rng.child(0).uniform(0.2, 0.6, size=(B, K)), axis=1)
    X = rng.child(1).normal(size=(B, K, n, nx))
    A = np.stack([_path_graph(n), np.ones((n, n)) - np.eye(n)] * K)[:K]
    batch = HybridBatch(times, X, A, times[:, -1] + 0.5)
    m = HybridGDEModel(GCGRUParams("j", nx, nz), (AffineSpec("y", nz, 1),),
                       FieldSpec([GCNLayerSpec("f.0", nz, 5, "tanh"), GCNLayerSpec("f.1", 5, nz)]))
    params = m.build_params(rng.child(2))
    targets = {k: rng.child(10 + k).normal(size=(B, n, 1)) for k in range(K)}
    targets["query"] = rng.child(9).normal(size=(B, n, 1))
    return m, params, batch, TimestampedLoss.readout_mse(m, batch, targets)


def _check_hybrid(rng: RngStream):
    m, params, batch, loss = _hybrid_instance(rng, K=2)
    cfg = SolverConfig("dopri5", rtol=1e-10, atol=1e-12)
    res = hybrid_adjoint_grad(m, params, batch, loss, cfg)

    def value(theta):
        q = params.with_theta(theta)
        return float(ad.value(loss.total(gcde_gru_forward(m, q, batch, cfg=cfg), q)))

    return res.grad, finite_difference_grad(value, params.theta)


def hybrid_equivalence(seed: int = 0, h: float = 0.01):
    """Continuous adjoint and backprop through RK4 on a 3-timestamp stream; returns ``(adjoint, backprop)``."""
    m, params, batch, loss = _hybrid_instance(RngStream(seed, 5), K=3)
    adj = hybrid_adjoint_grad(m, params, batch, loss, SolverConfig("dopri5", rtol=1e-10, atol=1e-12))
    fixed = SolverConfig("rk4", h=h)
    _, bp = backprop_value_and_grad(lambda w: loss.total(gcde_gru_forward(m, w, batch, cfg=fixed), w), params)
    return adj.grad, bp


def _check_gsde(rng: RngStream):
    n, nz, B = 4, 2, 1
    drift = FieldSpec([GCNLayerSpec("drift.0", nz, 3, "tanh"), GCNLayerSpec("drift.1", 3, nz)])
    diffusion = FieldSpec([GCNLayerSpec("diff.0", nz, 3, "tanh"), GCNLayerSpec("diff.1", 3, nz, "sigmoid")])
    params = ParamStore.build(drift, diffusion, rng=rng.child(0))
    ops = GraphOps(_path_graph(n))
    Z0 = rng.child(1).normal(size=(B, n, nz))
    path = BrownianPath(rng.child(2), (B, n, nz), 0.0, 1.0)
    cfg = SolverConfig("euler_heun", h=0.05)

    def objective(w):
        traj = integrate_euler_heun(lambda t, Z: stacked_field_eval(drift, t, Z, w, ops),
                                    lambda t, Z: stacked_field_eval(diffusion, t, Z, w, ops),
                                    Z0, (0.0, 1.0), path, cfg)
        return ad.mean(ad.square(traj.final))

    _, grad = backprop_value_and_grad(objective, params)
    fd = finite_difference_grad(lambda th: float(ad.value(objective(params.with_theta(th)))), params.theta)
    return grad, fd


GRADIENT_CHECKS = ("gcde_static", "gcde_second_order", "gcde_gru_hybrid", "gsde_unrolled")


def gradient_checks(seed: int = 0) -> dict:
    """Relative error of each model family's gradient against central finite differences."""
    rng = RngStream(seed, 5)
    cases = {
        "gcde_static": lambda: _check_static(rng.child(0), False),
        "gcde_second_order": lambda: _check_static(rng.child(1), True),
        "gcde_gru_hybrid": lambda: _check_hybrid(rng.child(2)),
        "gsde_unrolled": lambda: _check_gsde(rng.child(3)),
    }
    return {name: relative_error(*cases[name]()) for name in GRADIENT_CHECKS}


# =========================================================================== CSV helpers


def write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

