"""Model assemblies built from the layer primitives and solvers.

* :class:`NeuralGDEModel` - ``Z0 = lx(X)``, ``dZ/dt = f_G(t, Z)``, ``Y = ly(Z_t)``
  (second-order fields keep ``[P | V]`` and read positions out).
* :class:`HybridGDEModel` - graph flow between timestamps, GCGRU jumps at them.
* :class:`LatentGDEModel` - temporal-conv encoder, Gaussian posterior over an
  augmented graph, Stratonovich GSDE decoder, ELBO objective.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import DynamicGraphStream, Graph, HybridArc
from .layers import (
    AffineSpec,
    FieldSpec,
    GATLayerSpec,
    GCGRUParams,
    GCNLayerSpec,
    GMDESpec,
    GraphOps,
    ParamStore,
    TemporalConvSpec,
    _SlabView,
    affine_forward,
    gcgru_jump,
    graph_ops,
    layer_stack,
    stacked_field_eval,
    temporal_conv_forward,
)
from .numerics import ActivationKind, RngStream, ShapeError
from .solvers import (
    BrownianPath,
    SolverConfig,
    Trajectory,
    integrate,
    integrate_euler_heun,
)


# --------------------------------------------------------------------------- flows


def field_function(spec: FieldSpec, params, g, slab: int | None = None, scale=None):
    """Close over ``(spec, params, graph)`` to get ``f(t, Z)`` for a solver.

    ``slab`` pins the parameter slab of a time-varying field; ``scale``
    multiplies the output (used to map a physical interval onto ``s in [0, 1]``).
    """
    ops = graph_ops(g)
    w = params if slab is None else _SlabView(params, slab)
    pinned = dataclasses.replace(spec, depth_grid=None) if slab is not None else spec

    def f(t, Z):
        out = stacked_field_eval(pinned, t, Z, w, ops)
        return out if scale is None else ad.mul(out, scale)

    return f


def depth_pieces(spec: FieldSpec, span) -> list[tuple[float, float, int | None]]:
    """Split ``span`` at the parameter-slab boundaries of a time-varying field."""
    t0, t1 = float(span[0]), float(span[1])
    if spec.depth_grid is None:
        return [(t0, t1, None)]
    g0, g1, k = spec.depth_grid
    k = int(k)
    edges = [g0 + (g1 - g0) * i / k for i in range(k + 1)]
    lo, hi = min(t0, t1), max(t0, t1)
    cuts = sorted({lo, hi} | {e for e in edges if lo < e < hi})
    pieces = []
    for a, b in zip(cuts, cuts[1:]):
        pieces.append((a, b, spec.slab_index(0.5 * (a + b))))
    if t1 < t0:
        pieces = [(b, a, s) for a, b, s in reversed(pieces)]
    return pieces


def flow(spec: FieldSpec, params, g, Z0, span, cfg: SolverConfig, t_eval=None) -> Trajectory:
    """Integrate the field over ``span``, piece by piece for time-varying parameters."""
    traj = Trajectory([float(span[0])], [Z0], 0)
    Z = Z0
    for a, b, slab in depth_pieces(spec, span):
        part = integrate(field_function(spec, params, g, slab), Z, (a, b), cfg, t_eval)
        traj.times.extend(part.times[1:])
        traj.states.extend(part.states[1:])
        traj.n_field_evals += part.n_field_evals
        Z = part.final
    return traj


# --------------------------------------------------------------------------- static Neural GDE


@dataclass(frozen=True)
class NeuralGDEModel:
    field: FieldSpec
    input_map: tuple = ()
    output_map: tuple = ()
    span: tuple = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "input_map", tuple(self.input_map))
        object.__setattr__(self, "output_map", tuple(self.output_map))

    @property
    def position_dim(self) -> int:
        return self.field.out_dim if self.field.second_order else self.field.state_dim

    def param_specs(self):
        return [*self.input_map, self.field, *self.output_map]

    def build_params(self, rng: RngStream) -> ParamStore:
        return ParamStore.build(*self.param_specs(), rng=rng)

    def embed(self, X, params, g):
        """``Z0 = lx(X)``; second-order states get a zero velocity block."""
        P = layer_stack(self.input_map, X, graph_ops(g), params)
        width = ad.value(P).shape[-1]
        if width != self.position_dim:
            raise ShapeError(f"input map yields width {width}, field expects {self.position_dim}")
        if not self.field.second_order:
            return P
        return ad.concat([P, np.zeros(ad.value(P).shape)], axis=-1)

    def readout(self, Z, params, g):
        if self.field.second_order:
            Z = ad.getitem(Z, (Ellipsis, slice(0, self.field.out_dim)))
        return layer_stack(self.output_map, Z, graph_ops(g), params)


def gde_forward(m: NeuralGDEModel, params, X, g, t_eval, cfg: SolverConfig):
    """Predictions ``Y_t = ly(Phi_t(lx(X)))`` for each ``t`` in ``t_eval``."""
    t_eval = [float(t) for t in np.atleast_1d(t_eval)]
    lo, hi = min(m.span), max(m.span)
    for t in t_eval:
        if not lo - 1e-12 <= t <= hi + 1e-12:
            raise ValueError(f"t={t} lies outside the model span {m.span}")
    ops = graph_ops(g)
    Z0 = m.embed(X, params, ops)
    traj = flow(m.field, params, ops, Z0, (m.span[0], max(t_eval)), cfg, t_eval)
    return [m.readout(traj.state_at(t) if t != m.span[0] else Z0, params, ops) for t in t_eval]


def gde2_forward(m: NeuralGDEModel, params, X, g, t_eval, cfg: SolverConfig):
    if not m.field.second_order:
        raise ValueError("gde2_forward expects a second-order field")
    return gde_forward(m, params, X, g, t_eval, cfg)


# --------------------------------------------------------------------------- hybrid GCDE-GRU


@dataclass(frozen=True)
class HybridGDEModel:
    """Flow ``f_G`` between timestamps, jump ``lj`` (GCGRU) at them, head ``ly``.

    ``field=None`` gives the purely discrete GCGRU recurrence; ``jump=None``
    makes every jump the identity.
    """

    jump: GCGRUParams | None
    output_map: tuple = ()
    field: FieldSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "output_map", tuple(self.output_map))
        if self.field is not None:
            if not self.field.autonomous:
                raise ValueError("hybrid flows must be autonomous")
            if self.jump is not None and self.field.state_dim != self.jump.nz:
                raise ShapeError("flow state width must equal the GCGRU hidden width")

    @property
    def nz(self) -> int:
        return self.jump.nz if self.jump is not None else self.field.state_dim

    def param_specs(self):
        return [s for s in (self.jump, self.field, *self.output_map) if s is not None]

    def build_params(self, rng: RngStream) -> ParamStore:
        return ParamStore.build(*self.param_specs(), rng=rng)

    def readout(self, Z, params, g):
        return layer_stack(self.output_map, Z, graph_ops(g), params)


@dataclass
class HybridBatch:
    """``B`` streams of equal length ``K`` in array form.

    ``adjacency`` is ``(K, n, n)`` (shared) or ``(B, K, n, n)``.
    ``query_times`` optionally asks for a forecast at ``t_q > t_K`` per stream.
    """

    times: np.ndarray
    features: np.ndarray
    adjacency: np.ndarray
    query_times: np.ndarray | None = None
    _ops: list = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.atleast_2d(np.asarray(self.times, dtype=np.float64))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 3:
            self.features = self.features[None]
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        B, K = self.times.shape
        if self.features.shape[:2] != (B, K):
            raise ShapeError(f"features {self.features.shape} do not match times {self.times.shape}")
        if np.any(np.diff(self.times, axis=1) <= 0):
            raise ValueError("stream timestamps must be strictly increasing")
        if self.query_times is not None:
            self.query_times = np.asarray(self.query_times, dtype=np.float64).reshape(B)
            if np.any(self.query_times <= self.times[:, -1]):
                raise ValueError("query times must come after the last timestamp")

    @property
    def B(self) -> int:
        return self.times.shape[0]

    @property
    def K(self) -> int:
        return self.times.shape[1]

    def ops(self, k: int) -> GraphOps:
        if self._ops is None:
            self._ops = [None] * self.K
        if self._ops[k] is None:
            a = self.adjacency[k] if self.adjacency.ndim == 3 else self.adjacency[:, k]
            self._ops[k] = GraphOps(a)
        return self._ops[k]

    def interval(self, k: int) -> np.ndarray:
        """Per-stream duration of hybrid interval ``[t_k, t_{k+1}]`` as ``(B, 1, 1)``."""
        if k == self.K - 1:
            d = self.query_times - self.times[:, -1]
        else:
            d = self.times[:, k + 1] - self.times[:, k]
        return d.reshape(-1, 1, 1)

    @classmethod
    def from_stream(cls, stream: DynamicGraphStream, query_time: float | None = None):
        q = None if query_time is None else np.array([query_time])
        return cls(stream.timestamps[None], stream.feature_array()[None],
                   stream.adjacency_array(), q)


@dataclass
class HybridResult:
    arc: HybridArc
    predictions: list
    query_state: object = None
    query_prediction: object = None
    query_segment: Trajectory | None = None


def hybrid_flow_segment(m: HybridGDEModel, params, batch: HybridBatch, k: int, Z, cfg):
    """Integrate interval ``k`` in rescaled time ``s in [0, 1]``."""
    dt = batch.interval(k)
    f = field_function(m.field, params, batch.ops(k), scale=dt)
    return integrate(f, Z, (0.0, 1.0), cfg)


def gcde_gru_forward(m: HybridGDEModel, params, batch: HybridBatch | DynamicGraphStream,
                     Z_init=None, cfg: SolverConfig | None = None) -> HybridResult:
    """Alternate flows and jumps over the stream.

    Interval ``[t_k, t_{k+1}]`` flows with the graph observed at ``t_k``; the
    jump at ``t_k`` consumes ``X_{t_k}``; ``ly`` is read after every jump.  With
    ``batch.query_times`` the last post-jump state also flows to the query time.
    """
    if isinstance(batch, DynamicGraphStream):
        if len(batch) < 2:
            raise ValueError("stream must hold at least two timestamps")
        batch = HybridBatch.from_stream(batch)
    cfg = cfg or SolverConfig("dopri5", rtol=1e-6, atol=1e-8)
    n = batch.features.shape[2]
    Z = np.zeros((batch.B, n, m.nz)) if Z_init is None else Z_init
    arc = HybridArc()
    preds = []
    for k in range(batch.K):
        if k > 0 and m.field is not None:
            seg = hybrid_flow_segment(m, params, batch, k - 1, Z, cfg)
            arc.segments.append(seg)
            Z = seg.final
        pre = Z
        if m.jump is not None:
            Z = gcgru_jump(batch.ops(k).laplacian, Z, batch.features[:, k], m.jump, params)
        arc.jumps.append((pre, Z))
        arc.jump_times.append(batch.times[:, k])
        preds.append(m.readout(Z, params, batch.ops(k)))
    result = HybridResult(arc, preds)
    if batch.query_times is not None:
        if m.field is not None:
            seg = hybrid_flow_segment(m, params, batch, batch.K - 1, Z, cfg)
            result.query_segment = seg
            Zq = seg.final
        else:
            Zq = Z
        result.query_state = Zq
        result.query_prediction = m.readout(Zq, params, batch.ops(batch.K - 1))
    return result


# --------------------------------------------------------------------------- latent GSDE


@dataclass
class PosteriorParams:
    mean: object
    logvar: object

    @property
    def std(self):
        return np.exp(0.5 * ad.value(self.logvar))


@dataclass(frozen=True)
class LatentGDEModel:
    """Encoder -> diagonal Gaussian over an augmented graph -> GSDE decoder.

    Observed nodes carry the data features; latent nodes get their encoding
    by averaging the encodings of the observed nodes they touch.  Predictions
    are the observed-node rows of the decoded state.
    """

    encoder: tuple
    obs_mean: AffineSpec
    obs_logvar: AffineSpec
    lat_mean: AffineSpec
    lat_logvar: AffineSpec
    drift: FieldSpec
    diffusion: FieldSpec
    graph: Graph
    output_nodes: tuple
    sigma_obs: float = 0.1
    diffusion_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(self.encoder))
        object.__setattr__(self, "output_nodes", tuple(int(i) for i in self.output_nodes))
        if self.drift.state_dim != self.diffusion.state_dim or self.drift.out_dim != self.diffusion.out_dim:
            raise ShapeError("drift and diffusion must share input and output shapes")
        if self.sigma_obs <= 0:
            raise ValueError("sigma_obs must be positive")
        outs = set(self.output_nodes)
        if len(outs) != len(self.output_nodes) or not outs <= set(range(self.graph.n)):
            raise ValueError("output nodes must be distinct graph nodes")

    @property
    def latent_nodes(self) -> tuple:
        outs = set(self.output_nodes)
        return tuple(i for i in range(self.graph.n) if i not in outs)

    @property
    def nz(self) -> int:
        return self.drift.state_dim

    def param_specs(self):
        return [*self.encoder, self.obs_mean, self.obs_logvar, self.lat_mean, self.lat_logvar,
                self.drift, self.diffusion]

    def build_params(self, rng: RngStream) -> ParamStore:
        return ParamStore.build(*self.param_specs(), rng=rng)

    def latent_pooling(self) -> np.ndarray:
        """Row-normalized latent-by-observed incidence used to pool encodings."""
        a = self.graph.adjacency[np.ix_(self.latent_nodes, self.output_nodes)]
        deg = a.sum(axis=1, keepdims=True)
        return a / np.where(deg > 0, deg, 1.0)


def latent_encode(m: LatentGDEModel, params, history, rng: RngStream | None = None, eps=None):
    """Encode ``history`` ``(B, T, n_obs)`` into a posterior and a reparametrized sample.

    Returns ``(PosteriorParams, Z0)`` where both posterior fields and ``Z0``
    have shape ``(B, n_nodes, nz)`` with nodes in graph order.
    """
    x = np.swapaxes(np.asarray(history, dtype=np.float64), -1, -2)[..., None]  # (B, n_obs, T, 1)
    for conv in m.encoder:
        x = temporal_conv_forward(x, conv, params)
    E_obs = ad.getitem(x, (Ellipsis, -1, slice(None)))  # last step, (B, n_obs, H)
    E_lat = ad.matmul(m.latent_pooling(), E_obs)
    mean_o = affine(E_obs, m.obs_mean, params)
    logv_o = affine(E_obs, m.obs_logvar, params)
    mean_l = affine(E_lat, m.lat_mean, params)
    logv_l = affine(E_lat, m.lat_logvar, params)
    order = np.argsort(np.array(m.output_nodes + m.latent_nodes))
    mean = ad.getitem(ad.concat([mean_o, mean_l], axis=-2), (Ellipsis, order, slice(None)))
    logvar = ad.getitem(ad.concat([logv_o, logv_l], axis=-2), (Ellipsis, order, slice(None)))
    post = PosteriorParams(mean, logvar)
    if eps is None:
        rng = rng or RngStream(0)
        eps = rng.normal(size=ad.value(mean).shape)
    Z0 = ad.add(mean, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))
    return post, Z0


def affine(X, spec: AffineSpec, params):
    return affine_forward(X, spec, params)


def gsde_functions(m: LatentGDEModel, params, record: list | None = None):
    ops = graph_ops(m.graph)

    def drift(t, Z):
        if record is None:
            return stacked_field_eval(m.drift, t, Z, params, ops)
        rec = []
        out = stacked_field_eval(m.drift, t, Z, params, ops, rec)
        record.extend((float(t), name, alpha) for name, alpha in rec)
        return out

    def diffusion(t, Z):
        g = stacked_field_eval(m.diffusion, t, Z, params, ops)
        return g if m.diffusion_scale == 1.0 else ad.mul(g, m.diffusion_scale)

    return drift, diffusion


def gsde_decode(m: LatentGDEModel, params, Z0, t_eval, path: BrownianPath, cfg: SolverConfig,
                t0: float = 0.0, record: list | None = None):
    """Decode from ``Z0`` at ``t0``; returns ``[Y_t for t in t_eval]`` (output-node rows).

    ``record`` collects ``(t, layer name, attention)`` for every drift evaluation.
    """
    drift, diffusion = gsde_functions(m, params, record)
    t_eval = [float(t) for t in t_eval]
    traj = integrate_euler_heun(drift, diffusion, Z0, (t0, max(t_eval)), path, cfg, t_eval)
    rows = list(m.output_nodes)
    out = []
    for t in t_eval:
        Z = Z0 if t == t0 else traj.state_at(t)
        out.append(ad.getitem(Z, (Ellipsis, rows, slice(None))))
    return out, traj


def kl_standard_normal(post: PosteriorParams):
    """``KL(N(mean, exp(logvar)) || N(0, I))`` summed over every entry."""
    mu, lv = post.mean, post.logvar
    terms = ad.sub(ad.add(ad.square(mu), ad.exp(lv)), ad.add(lv, 1.0))
    return ad.mul(ad.sum(terms), 0.5)


def gaussian_loglik(predictions, targets, sigma_obs: float):
    if sigma_obs <= 0:
        raise ValueError(f"sigma_obs must be positive, got {sigma_obs}")
    total = 0.0
    count = 0
    for pred, target in zip(predictions, targets):
        target = np.asarray(target, dtype=np.float64)
        if ad.value(pred).shape != target.shape:
            raise ShapeError(f"prediction {ad.value(pred).shape} vs target {target.shape}")
        resid = ad.sub(pred, target)
        total = ad.add(total, ad.sum(ad.square(resid)))
        count += target.size
    const = 0.5 * count * math.log(2.0 * math.pi * sigma_obs**2)
    return ad.sub(ad.mul(total, -0.5 / sigma_obs**2), const)


def elbo_loss(predictions, targets, post: PosteriorParams, sigma_obs: float):
    """Negative ELBO: ``-(sum_k log N(y_k; yhat_k, sigma^2 I) - KL(q || N(0, I)))``."""
    return ad.neg(ad.sub(gaussian_loglik(predictions, targets, sigma_obs), kl_standard_normal(post)))


# --------------------------------------------------------------------------- serialization

_REGISTRY = {
    cls.__name__: cls
    for cls in (AffineSpec, GCNLayerSpec, GATLayerSpec, GMDESpec, GCGRUParams, TemporalConvSpec,
                FieldSpec, NeuralGDEModel, HybridGDEModel, LatentGDEModel)
}


def describe(obj):
    """JSON-ready description of specs and models (inverse: :func:`rebuild`)."""
    if isinstance(obj, ActivationKind):
        return {"type": "ActivationKind", "value": str(obj)}
    if isinstance(obj, Graph):
        return {"type": "Graph", "n": obj.n, "edges": [list(e) for e in obj.edges()]}
    if dataclasses.is_dataclass(obj) and type(obj).__name__ in _REGISTRY:
        out = {"type": type(obj).__name__}
        for f in dataclasses.fields(obj):
            out[f.name] = describe(getattr(obj, f.name))
        return out
    if isinstance(obj, (list, tuple)):
        return [describe(x) for x in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def rebuild(d):
    if isinstance(d, list):
        return tuple(rebuild(x) for x in d)
    if not isinstance(d, dict) or "type" not in d:
        return d
    kind = d["type"]
    if kind == "ActivationKind":
        return ActivationKind.parse(d["value"])
    if kind == "Graph":
        return Graph.from_edges(d["n"], [tuple(e) for e in d["edges"]])
    cls = _REGISTRY[kind]
    kwargs = {k: rebuild(v) for k, v in d.items() if k != "type"}
    return cls(**kwargs)


CHECKPOINT_FORMAT = "neuralgde-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, params: ParamStore, seeds: dict | None = None, extra: dict | None = None):
    """Write a JSON checkpoint; theta is stored as ``float.hex`` strings (bit-exact)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": describe(model),
        "views": [[name, list(shape)] for name, (_, shape) in params.views.items()],
        "theta": [float(x).hex() for x in params.theta],
        "seeds": seeds or {},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Return ``(model, params, seeds, extra)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    model = rebuild(doc["model"])
    theta = np.array([float.fromhex(x) for x in doc["theta"]])
    params = ParamStore([(name, tuple(shape)) for name, shape in doc["views"]], theta)
    return model, params, doc.get("seeds", {}), doc.get("extra", {})
