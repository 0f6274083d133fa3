"""Graph-layer primitives and the stacked vector field ``f_G(t, Z, theta)``.

Forward functions are written against :mod:`neuralgde.autodiff`, so the same
code evaluates on plain arrays or records a tape when given ``Var`` inputs.
Reverse products (:func:`field_vjp`, :func:`jump_vjp`) replay that tape.

Parameters live in one flat vector (:class:`ParamStore`) and every weight is a
named reshaped window of it.  Forward functions take any mapping from view
name to array (or ``Var``), which is how the tape substitutes leaf nodes.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .graph import Graph, normalized_laplacian
from .numerics import ActivationKind, RngStream, ShapeError


# --------------------------------------------------------------------------- parameters


class ParamStore(Mapping):
    """Flat parameter vector with named ``(offset, shape)`` windows."""

    def __init__(self, shapes, theta=None):
        self.views: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in shapes:
            if name in self.views:
                raise ValueError(f"duplicate parameter view {name!r}")
            shape = tuple(int(s) for s in shape)
            self.views[name] = (offset, shape)
            offset += int(np.prod(shape)) if shape else 1
        self.size = offset
        if theta is None:
            theta = np.zeros(offset)
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (offset,):
            raise ShapeError(f"theta has shape {theta.shape}, views need ({offset},)")
        self.theta = theta

    @classmethod
    def build(cls, *specs, rng: RngStream | None = None, theta=None) -> "ParamStore":
        """Allocate views for every spec and initialize them from ``rng``."""
        entries = []
        for spec in specs:
            if spec is None:
                continue
            entries.extend(spec.param_shapes())
        store = cls([(name, shape) for name, shape, _ in entries], theta)
        if theta is None and rng is not None:
            for name, shape, init in entries:
                store.view(name)[...] = _initial_values(init, shape, rng)
        return store

    def __getitem__(self, name: str) -> np.ndarray:
        return self.view(name)

    def __iter__(self):
        return iter(self.views)

    def __len__(self) -> int:
        return len(self.views)

    def view(self, name: str) -> np.ndarray:
        try:
            offset, shape = self.views[name]
        except KeyError:
            raise KeyError(f"no parameter view named {name!r}") from None
        size = int(np.prod(shape)) if shape else 1
        return self.theta[offset : offset + size].reshape(shape)

    def leaves(self, names=None) -> dict[str, Var]:
        names = self.views if names is None else names
        return {name: Var(self.view(name)) for name in names}

    def flatten_grads(self, leaves: Mapping[str, Var]) -> np.ndarray:
        out = np.zeros(self.size)
        for name, leaf in leaves.items():
            if leaf.grad is None:
                continue
            offset, shape = self.views[name]
            out[offset : offset + leaf.grad.size] += leaf.grad.ravel()
        return out

    def with_theta(self, theta) -> "ParamStore":
        new = ParamStore.__new__(ParamStore)
        new.views = self.views
        new.size = self.size
        new.theta = np.array(theta, dtype=np.float64)
        if new.theta.shape != (self.size,):
            raise ShapeError(f"theta has shape {new.theta.shape}, expected ({self.size},)")
        return new

    def copy(self) -> "ParamStore":
        return self.with_theta(self.theta.copy())

    def mask(self, prefix: str) -> np.ndarray:
        """Boolean mask over theta selecting views whose name starts with ``prefix``."""
        m = np.zeros(self.size, dtype=bool)
        for name, (offset, shape) in self.views.items():
            if name.startswith(prefix):
                m[offset : offset + (int(np.prod(shape)) if shape else 1)] = True
        return m


def _initial_values(init, shape, rng: RngStream) -> np.ndarray:
    kind, scale = init if isinstance(init, tuple) else (init, 1.0)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "constant":
        return np.full(shape, float(scale))
    if kind == "normal":
        return rng.normal(size=shape, scale=scale)
    if kind == "glorot":
        fan_in = shape[0] if len(shape) >= 1 else 1
        fan_out = shape[-1] if len(shape) >= 2 else 1
        limit = scale * math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)
    raise ValueError(f"unknown initializer {kind!r}")


# --------------------------------------------------------------------------- layer specs


@dataclass(frozen=True)
class AffineSpec:
    """Node-wise affine map ``act(Z W + b)`` shared by every node."""

    name: str
    in_dim: int
    out_dim: int
    activation: ActivationKind = ActivationKind("identity")
    bias: bool = True
    init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))

    def param_shapes(self):
        shapes = [(f"{self.name}.W", (self.in_dim, self.out_dim), ("glorot", self.init_scale))]
        if self.bias:
            shapes.append((f"{self.name}.b", (self.out_dim,), "zeros"))
        return shapes


@dataclass(frozen=True)
class GCNLayerSpec:
    name: str
    in_dim: int
    out_dim: int
    activation: ActivationKind = ActivationKind("identity")
    init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))

    @property
    def weight(self) -> str:
        return f"{self.name}.W"

    def param_shapes(self):
        return [(self.weight, (self.in_dim, self.out_dim), ("glorot", self.init_scale))]


@dataclass(frozen=True)
class GATLayerSpec:
    name: str
    in_dim: int
    out_dim: int
    activation: ActivationKind = ActivationKind("identity")
    slope: float = 0.2
    init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))

    @property
    def weight(self) -> str:
        return f"{self.name}.W"

    @property
    def attention(self) -> str:
        return f"{self.name}.a"

    def param_shapes(self):
        return [
            (self.weight, (self.in_dim, self.out_dim), ("glorot", self.init_scale)),
            (self.attention, (2 * self.out_dim,), ("normal", 0.5)),
        ]


@dataclass(frozen=True)
class GMDESpec:
    """Message passing field: ``z'_v = g(sum_{u in N(v)} m(z_v, z_u))``."""

    name: str
    nz: int
    msg_dim: int
    msg_activation: ActivationKind = ActivationKind("tanh")
    update_activation: ActivationKind = ActivationKind("identity")
    init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "msg_activation", ActivationKind.parse(self.msg_activation))
        object.__setattr__(self, "update_activation", ActivationKind.parse(self.update_activation))

    @property
    def in_dim(self) -> int:
        return self.nz

    @property
    def out_dim(self) -> int:
        return self.nz

    def param_shapes(self):
        s = ("glorot", self.init_scale)
        return [
            (f"{self.name}.m.W", (2 * self.nz, self.msg_dim), s),
            (f"{self.name}.m.b", (self.msg_dim,), "zeros"),
            (f"{self.name}.g.W", (self.msg_dim, self.nz), s),
            (f"{self.name}.g.b", (self.nz,), "zeros"),
        ]


@dataclass(frozen=True)
class GCGRUParams:
    """Names and shapes of the six graph-convolutional GRU weights."""

    name: str
    nx: int
    nz: int
    init_scale: float = 1.0

    KEYS = ("xz", "hz", "xr", "hr", "xh", "hh")

    def weight(self, key: str) -> str:
        return f"{self.name}.W_{key}"

    def param_shapes(self):
        out = []
        for key in self.KEYS:
            rows = self.nx if key[0] == "x" else self.nz
            out.append((self.weight(key), (rows, self.nz), ("glorot", self.init_scale)))
        return out


@dataclass(frozen=True)
class TemporalConvSpec:
    """Causal 1-D convolution over the time axis of ``(..., T, channels)``."""

    name: str
    in_dim: int
    out_dim: int
    kernel: int = 3
    activation: ActivationKind = ActivationKind("relu")

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))

    def param_shapes(self):
        return [
            (f"{self.name}.W", (self.kernel * self.in_dim, self.out_dim), "glorot"),
            (f"{self.name}.b", (self.out_dim,), "zeros"),
        ]


LayerSpec = Union[AffineSpec, GCNLayerSpec, GATLayerSpec, GMDESpec]


@dataclass(frozen=True)
class FieldSpec:
    """An ordered layer stack defining ``dZ/dt``.

    ``depth_grid=(t0, t1, k)`` gives every layer ``k`` piecewise-constant
    parameter slabs over a uniform grid on ``[t0, t1]``.  With ``second_order``
    the state is ``[P | V]`` and the stack maps the full state to ``dV/dt``.
    """

    layers: tuple
    second_order: bool = False
    depth_grid: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a field needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer {prev.name} outputs {prev.out_dim} but {nxt.name} expects {nxt.in_dim}"
                )
        if self.second_order and self.in_dim != 2 * self.out_dim:
            raise ShapeError(
                f"second-order stack must map 2d -> d, got {self.in_dim} -> {self.out_dim}"
            )
        if self.depth_grid is not None:
            t0, t1, k = self.depth_grid
            if not t1 > t0 or int(k) < 1:
                raise ValueError(f"bad depth grid {self.depth_grid}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def state_dim(self) -> int:
        return self.in_dim

    @property
    def autonomous(self) -> bool:
        return self.depth_grid is None

    def param_shapes(self):
        base = [entry for layer in self.layers for entry in layer.param_shapes()]
        if self.depth_grid is None:
            return base
        k = int(self.depth_grid[2])
        return [(f"{name}@{i}", shape, init) for i in range(k) for name, shape, init in base]

    def slab_index(self, t: float) -> int:
        t0, t1, k = self.depth_grid
        k = int(k)
        tol = 1e-9 * max(1.0, abs(t1 - t0))
        if t < t0 - tol or t > t1 + tol:
            raise ValueError(f"t={t} outside the parameter depth span [{t0}, {t1}]")
        idx = int(math.floor((t - t0) / (t1 - t0) * k))
        return min(max(idx, 0), k - 1)


class _SlabView(Mapping):
    def __init__(self, base: Mapping, index: int):
        self.base = base
        self.suffix = f"@{index}"

    def __getitem__(self, name):
        return self.base[name + self.suffix]

    def __iter__(self):
        return iter(self.base)

    def __len__(self):
        return len(self.base)


# --------------------------------------------------------------------------- graph operators


class GraphOps:
    """Cached operators for one graph or a stack of graphs ``(..., n, n)``."""

    __slots__ = ("adjacency", "_laplacian", "_mask")

    def __init__(self, adjacency, laplacian=None):
        self.adjacency = np.asarray(adjacency, dtype=np.float64)
        self._laplacian = laplacian
        self._mask = None

    @property
    def n(self) -> int:
        return self.adjacency.shape[-1]

    @property
    def laplacian(self) -> np.ndarray:
        if self._laplacian is None:
            self._laplacian = normalized_laplacian(self.adjacency)
        return self._laplacian

    @property
    def self_mask(self) -> np.ndarray:
        """Neighborhood-plus-self mask used by attention."""
        if self._mask is None:
            self._mask = (self.adjacency + np.eye(self.n)) > 0
        return self._mask


def graph_ops(g) -> GraphOps:
    if isinstance(g, GraphOps):
        return g
    if isinstance(g, Graph):
        return GraphOps(g.adjacency)
    return GraphOps(np.asarray(g, dtype=np.float64))


# --------------------------------------------------------------------------- forward maps


def affine_forward(Z, spec: AffineSpec, params):
    out = ad.matmul(Z, params[f"{spec.name}.W"])
    if spec.bias:
        out = ad.add(out, params[f"{spec.name}.b"])
    return ad.activation(spec.activation, out)


def gcn_forward(L, Z, spec: GCNLayerSpec, params):
    """``sigma(L Z W)``."""
    _check_in(Z, spec.in_dim, spec.name)
    return ad.activation(spec.activation, ad.matmul(L, ad.matmul(Z, params[spec.weight])))


def gat_forward(g, Z, spec: GATLayerSpec, params):
    """Single-head attention layer; returns ``(Z', alpha)``.

    ``e_vu = leaky_relu(a . [W z_v || W z_u])`` over ``u`` in the neighborhood
    of ``v`` plus ``v`` itself, ``alpha`` is the row softmax of ``e`` on that
    set, and ``Z'_v = sigma(sum_u alpha_vu W z_u)``.
    """
    _check_in(Z, spec.in_dim, spec.name)
    ops = graph_ops(g)
    H = ad.matmul(Z, params[spec.weight])
    a = params[spec.attention]
    d = spec.out_dim
    a_src = ad.reshape(ad.getitem(a, slice(0, d)), (d, 1))
    a_dst = ad.reshape(ad.getitem(a, slice(d, 2 * d)), (d, 1))
    s_src = ad.matmul(H, a_src)
    s_dst = ad.matmul(H, a_dst)
    logits = ad.activation(
        ActivationKind("leaky_relu", spec.slope), ad.add(s_src, ad.swap_last(s_dst))
    )
    alpha = ad.masked_softmax(logits, ops.self_mask)
    out = ad.activation(spec.activation, ad.matmul(alpha, H))
    return out, alpha


def gmde_field(g, Z, spec: GMDESpec, params):
    """Neighbor sum of pairwise messages passed through the update map."""
    _check_in(Z, spec.nz, spec.name)
    ops = graph_ops(g)
    nz = spec.nz
    Wm = params[f"{spec.name}.m.W"]
    P = ad.matmul(Z, ad.getitem(Wm, slice(0, nz)))
    Q = ad.matmul(Z, ad.getitem(Wm, slice(nz, 2 * nz)))
    shape = ad.value(P).shape
    P4 = ad.reshape(P, shape[:-1] + (1, shape[-1]))
    Q4 = ad.reshape(Q, shape[:-2] + (1,) + shape[-2:])
    msgs = ad.activation(spec.msg_activation, ad.add(ad.add(P4, Q4), params[f"{spec.name}.m.b"]))
    summed = ad.sum(ad.mul(msgs, ops.adjacency[..., :, :, None]), axis=-2)
    upd = ad.add(ad.matmul(summed, params[f"{spec.name}.g.W"]), params[f"{spec.name}.g.b"])
    return ad.activation(spec.update_activation, upd)


def gcgru_jump(L, Z, X, p: GCGRUParams, params):
    """Graph-convolutional GRU update ``Z+ = H*Z + (1 - H)*Z~``."""
    _check_in(Z, p.nz, p.name)
    _check_in(X, p.nx, p.name)
    w = {key: params[p.weight(key)] for key in p.KEYS}
    LX = ad.matmul(L, X)
    LZ = ad.matmul(L, Z)
    H = ad.sigmoid(ad.add(ad.matmul(LX, w["xz"]), ad.matmul(LZ, w["hz"])))
    R = ad.sigmoid(ad.add(ad.matmul(LX, w["xr"]), ad.matmul(LZ, w["hr"])))
    RZ = ad.matmul(L, ad.mul(R, Z))
    Zt = ad.tanh(ad.add(ad.matmul(LX, w["xh"]), ad.matmul(RZ, w["hh"])))
    return ad.add(ad.mul(H, Z), ad.mul(ad.sub(1.0, H), Zt))


def temporal_conv_forward(X, spec: TemporalConvSpec, params):
    """Causal convolution: output step ``t`` sees input steps ``t-k+1 .. t``."""
    shape = ad.value(X).shape
    T = shape[-2]
    pad = np.zeros(shape[:-2] + (spec.kernel - 1, shape[-1]))
    Xp = ad.concat([pad, X], axis=-2) if spec.kernel > 1 else X
    taps = [ad.getitem(Xp, (Ellipsis, slice(j, j + T), slice(None))) for j in range(spec.kernel)]
    windows = ad.concat(taps, axis=-1)
    out = ad.add(ad.matmul(windows, params[f"{spec.name}.W"]), params[f"{spec.name}.b"])
    return ad.activation(spec.activation, out)


def _check_in(Z, dim, name):
    got = ad.value(Z).shape[-1]
    if got != dim:
        raise ShapeError(f"{name}: expected feature width {dim}, got {got}")


def apply_layer(layer, ops: GraphOps, h, params, record: list | None = None):
    if isinstance(layer, GCNLayerSpec):
        return gcn_forward(ops.laplacian, h, layer, params)
    if isinstance(layer, GATLayerSpec):
        out, alpha = gat_forward(ops, h, layer, params)
        if record is not None:
            record.append((layer.name, ad.value(alpha)))
        return out
    if isinstance(layer, GMDESpec):
        return gmde_field(ops, h, layer, params)
    if isinstance(layer, AffineSpec):
        return affine_forward(h, layer, params)
    raise TypeError(f"unsupported layer {type(layer).__name__}")


def stacked_field_eval(spec: FieldSpec, t: float, Z, params, g, record: list | None = None):
    """Evaluate ``f_G(t, Z)`` for the layer stack in ``spec``.

    ``record``, when given, collects ``(layer name, attention matrix)`` pairs.
    """
    ops = graph_ops(g)
    w = params if spec.depth_grid is None else _SlabView(params, spec.slab_index(float(t)))
    width = ad.value(Z).shape[-1]
    if width != spec.state_dim:
        raise ShapeError(f"field expects state width {spec.state_dim}, got {width}")
    h = Z
    for layer in spec.layers:
        h = apply_layer(layer, ops, h, w, record)
    if spec.second_order:
        d = spec.out_dim
        velocity = ad.getitem(Z, (Ellipsis, slice(d, 2 * d)))
        return ad.concat([velocity, h], axis=-1)
    return h


def layer_stack(layers, X, ops, params):
    """Run a plain list of layers (used for input/output maps and heads)."""
    h = X
    for layer in layers:
        h = apply_layer(layer, ops, h, params)
    return h


# --------------------------------------------------------------------------- reverse products


def field_vjp(spec: FieldSpec, t: float, Z, lam, params: ParamStore, g):
    """Return ``((df/dZ)^T lam, (df/dtheta)^T lam)`` at ``(t, Z)``.

    The parameter cotangent is a full-length vector over ``params``; views the
    field does not touch stay zero.
    """
    leaves = params.leaves()
    Zv = Var(Z)
    out = stacked_field_eval(spec, t, Zv, leaves, g)
    ad.backward(out, lam)
    return ad.grad_of(Zv), params.flatten_grads(leaves)


def jump_vjp(L, Z, X, p: GCGRUParams, params: ParamStore, lam):
    """Reverse product of :func:`gcgru_jump` w.r.t. the pre-jump state and weights."""
    leaves = params.leaves([p.weight(k) for k in p.KEYS])
    Zv = Var(Z)
    out = gcgru_jump(L, Zv, X, p, leaves)
    ad.backward(out, lam)
    return ad.grad_of(Zv), params.flatten_grads(leaves)
