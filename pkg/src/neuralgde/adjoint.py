"""Gradients of losses through graph flows and hybrid flow/jump arcs.

The continuous adjoint integrates ``(z, lambda, g_theta)`` backward in time:

    dz/dt = f(t, z),  dlambda/dt = -(df/dz)^T lambda,  dg/dt = -(df/dtheta)^T lambda

starting from ``lambda(T) = dL/dz(T)`` and ``g(T) = 0``.  The state is
re-integrated backward from its recorded end point.  When that replay drifts
away from the forward trajectory (stiff or contractive fields), the sweep is
redone against a Hermite interpolant of the stored forward steps.

For hybrid arcs the sweep runs interval by interval: at each jump the
cost gradient is added to ``lambda`` and the jump's reverse product maps it
to the pre-jump state.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .layers import FieldSpec, ParamStore, _SlabView, graph_ops, jump_vjp, stacked_field_eval
from .models import (
    HybridBatch,
    HybridGDEModel,
    NeuralGDEModel,
    depth_pieces,
    field_function,
    flow,
    gcde_gru_forward,
)
from .solvers import SolverConfig, SolverError, Trajectory, integrate

_REPLAY_MODES = ("auto", "reintegrate", "stored")


@dataclass
class AdjointResult:
    value: float
    grad: np.ndarray
    dZ0: np.ndarray | None = None
    n_field_evals: int = 0
    stored_replays: int = 0


# --------------------------------------------------------------------------- field closures


def field_and_vjp(spec: FieldSpec, params: ParamStore, g, slab: int | None = None, scale=None):
    """``f(t, Z)`` and ``vjp(t, Z, lam) -> (dZ, dtheta)`` for one field configuration."""
    f = field_function(spec, params, g, slab, scale)
    ops = graph_ops(g)
    pinned = dataclasses.replace(spec, depth_grid=None) if slab is not None else spec

    def vjp(t, Z, lam):
        leaves = params.leaves()
        w = leaves if slab is None else _SlabView(leaves, slab)
        Zv = Var(Z)
        out = stacked_field_eval(pinned, t, Zv, w, ops)
        ad.backward(out, lam if scale is None else lam * scale)
        return ad.grad_of(Zv), params.flatten_grads(leaves)

    return f, vjp


# --------------------------------------------------------------------------- backward sweeps


def adjoint_sweep(f, vjp, Z_end, lam_end, span, cfg: SolverConfig, n_theta: int):
    """Integrate the augmented system from ``span[1]`` back to ``span[0]``.

    Returns ``(z_replayed, lambda, g_theta, n_field_evals)`` at ``span[0]``.
    """
    Z_end = np.asarray(Z_end, dtype=np.float64)
    shape = Z_end.shape
    nz = Z_end.size

    def aug(t, y):
        z = y[:nz].reshape(shape)
        lam = y[nz : 2 * nz].reshape(shape)
        vz, vth = vjp(t, z, lam)
        return np.concatenate([np.ravel(f(t, z)), -vz.ravel(), -vth])

    y_end = np.concatenate([Z_end.ravel(), np.asarray(lam_end, dtype=np.float64).ravel(), np.zeros(n_theta)])
    traj = integrate(aug, y_end, (span[1], span[0]), cfg)
    y0 = traj.final
    return (y0[:nz].reshape(shape), y0[nz : 2 * nz].reshape(shape), y0[2 * nz :].copy(),
            traj.n_field_evals)


def _hermite(t, ta, tb, za, zb, fa, fb):
    h = tb - ta
    s = (t - ta) / h
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * za + h10 * h * fa + h01 * zb + h11 * h * fb


def stored_sweep(f, vjp, forward: Trajectory, lam_end, n_theta: int, substeps: int = 2):
    """Backward RK4 sweep for ``(lambda, g_theta)`` with ``z`` taken from the forward steps.

    Between stored states ``z`` is the cubic Hermite interpolant built from the
    states and field values at both ends of each forward step.
    """
    times = [float(t) for t in forward.times]
    states = [np.asarray(ad.value(s)) for s in forward.states]
    fvals = [np.asarray(f(t, z)) for t, z in zip(times, states)]
    n_evals = len(times)
    lam = np.asarray(lam_end, dtype=np.float64)
    g = np.zeros(n_theta)

    def rhs(t, lam, ia):
        z = _hermite(t, times[ia], times[ia + 1], states[ia], states[ia + 1], fvals[ia], fvals[ia + 1])
        vz, vth = vjp(t, z, lam)
        return -vz, -vth

    for ia in reversed(range(len(times) - 1)):
        ta, tb = times[ia], times[ia + 1]
        h = (ta - tb) / substeps
        t = tb
        for _ in range(substeps):
            k1 = rhs(t, lam, ia)
            k2 = rhs(t + 0.5 * h, lam + 0.5 * h * k1[0], ia)
            k3 = rhs(t + 0.5 * h, lam + 0.5 * h * k2[0], ia)
            k4 = rhs(t + h, lam + h * k3[0], ia)
            lam = lam + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            g = g + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            t += h
            n_evals += 4
    return lam, g, n_evals


def _replay_drift(z_rep, z_fwd, cfg: SolverConfig) -> float:
    scale = cfg.atol + cfg.rtol * np.abs(z_fwd)
    return float(np.sqrt(np.mean(np.square((z_rep - z_fwd) / scale))))


def segment_adjoint(f, vjp, forward: Trajectory, lam_end, cfg: SolverConfig, n_theta: int,
                    replay: str = "auto", replay_tol: float = 1e3):
    """Pull ``lam_end`` back over one forward segment.

    Returns ``(lambda_start, g_theta, n_field_evals, used_stored)``.
    ``replay_tol`` bounds the replay error in units of the solver tolerance.
    """
    if replay not in _REPLAY_MODES:
        raise ValueError(f"replay must be one of {_REPLAY_MODES}")
    span = (forward.times[0], forward.times[-1])
    if span[0] == span[1]:
        return np.asarray(lam_end), np.zeros(n_theta), 0, False
    n = 0
    if replay != "stored":
        try:
            z_rep, lam, g, n = adjoint_sweep(f, vjp, ad.value(forward.final), lam_end, span, cfg, n_theta)
            ok = _replay_drift(z_rep, np.asarray(ad.value(forward.states[0])), cfg) <= replay_tol
            if ok or replay == "reintegrate":
                return lam, g, n, False
        except SolverError:
            if replay == "reintegrate":
                raise
    lam, g, n2 = stored_sweep(f, vjp, forward, lam_end, n_theta)
    return lam, g, n + n2, True


# --------------------------------------------------------------------------- static GDE


def terminal_adjoint_grad(spec: FieldSpec, params: ParamStore, Z0, span, dL_dZT, g,
                          cfg: SolverConfig, replay: str = "auto") -> AdjointResult:
    """Gradient of a terminal loss ``L(Z(T))`` w.r.t. ``theta`` and ``Z0``.

    Only ``dL/dZ(T)`` is needed; ``value`` in the result is left at ``nan``.
    """
    out = multi_time_adjoint(spec, params, np.asarray(Z0, dtype=np.float64), span[0],
                             {float(span[1]): dL_dZT}, g, cfg, replay)
    out.value = float("nan")
    return out


def multi_time_adjoint(spec: FieldSpec, params: ParamStore, Z0, t0: float, cotangents: dict, g,
                       cfg: SolverConfig, replay: str = "auto") -> AdjointResult:
    """Adjoint for losses on several states ``Z(t_k)`` of one flow started at ``t0``.

    ``cotangents`` maps each ``t_k`` to ``dL/dZ(t_k)``; ``lambda`` jumps by
    that amount whenever the backward sweep passes ``t_k``.
    """
    times = sorted(float(t) for t in cotangents)
    if times and times[0] < t0:
        raise ValueError("loss times must not precede the initial time")
    t_end = times[-1] if times else t0
    pieces = depth_pieces(spec, (t0, t_end))
    forward = []
    Z = Z0
    n_evals = 0
    for a, b, slab in pieces:
        f, vjp = field_and_vjp(spec, params, g, slab)
        tr = integrate(f, Z, (a, b), cfg, times)
        n_evals += tr.n_field_evals
        # split at loss times so each sub-trajectory ends on a jump of lambda
        cuts = [i for i, t in enumerate(tr.times) if any(abs(t - s) <= 1e-12 * max(1, abs(s)) for s in times)]
        bounds = sorted(set([0] + cuts + [len(tr.times) - 1]))
        for i0, i1 in zip(bounds, bounds[1:]):
            forward.append((f, vjp, Trajectory(tr.times[i0 : i1 + 1], tr.states[i0 : i1 + 1], 0)))
        Z = tr.final
    lam = np.zeros_like(np.asarray(Z0, dtype=np.float64))
    grad = np.zeros(params.size)
    pending = dict((float(t), np.asarray(c, dtype=np.float64)) for t, c in cotangents.items())
    stored = 0

    def absorb(t):
        nonlocal lam
        for s in list(pending):
            if abs(s - t) <= 1e-12 * max(1.0, abs(s)):
                lam = lam + pending.pop(s)

    for f, vjp, tr in reversed(forward):
        absorb(tr.times[-1])
        lam, gth, n, used = segment_adjoint(f, vjp, tr, lam, cfg, params.size, replay)
        grad += gth
        n_evals += n
        stored += int(used)
    absorb(t0)
    return AdjointResult(float("nan"), grad, lam, n_evals, stored)


def gde_value_and_grad(m: NeuralGDEModel, params: ParamStore, X, g, t_eval, loss_fn: Callable,
                       cfg: SolverConfig, replay: str = "auto") -> AdjointResult:
    """Loss and gradient for ``loss_fn([Y_t for t in t_eval])``.

    ``lx`` and ``ly`` are differentiated on the tape; the flow in between
    uses :func:`multi_time_adjoint`.
    """
    ops = graph_ops(g)
    t_eval = [float(t) for t in np.atleast_1d(t_eval)]
    leaves = params.leaves()
    Z0v = m.embed(X, leaves, ops)
    Z0 = np.asarray(ad.value(Z0v))
    t_prev = float(m.span[0])
    traj = flow(m.field, params, ops, Z0, (t_prev, max(t_eval)), cfg, t_eval)
    n_evals = traj.n_field_evals
    state_vars = []
    for t in t_eval:
        Zt = Z0 if t == t_prev else np.asarray(traj.state_at(t))
        state_vars.append(Var(Zt))
    preds = [m.readout(zv, leaves, ops) for zv in state_vars]
    loss = loss_fn(preds)
    ad.backward(loss)
    head_grad = params.flatten_grads(leaves)
    cot = {}
    for t, zv in zip(t_eval, state_vars):
        cot[t] = cot.get(t, 0.0) + ad.grad_of(zv)
    res = multi_time_adjoint(m.field, params, Z0, t_prev, cot, ops, cfg, replay)
    embed_leaves = params.leaves()
    Z0v = m.embed(X, embed_leaves, ops)
    if isinstance(Z0v, Var):
        ad.backward(Z0v, res.dZ0)
    grad = head_grad + res.grad + params.flatten_grads(embed_leaves)
    return AdjointResult(float(ad.value(loss)), grad, None, n_evals + res.n_field_evals,
                         res.stored_replays)


# --------------------------------------------------------------------------- hybrid arcs


@dataclass
class TimestampedLoss:
    """Costs on post-jump states.

    ``costs`` maps a timestamp index ``k`` (or ``"query"`` for the forecast
    state) to ``c(Z, params) -> scalar`` written with :mod:`autodiff` ops.
    """

    costs: dict = field(default_factory=dict)

    def keys(self):
        return self.costs.keys()

    def evaluate(self, key, Z, params: ParamStore):
        """``(value, dc/dZ, dc/dtheta)`` at state ``Z``."""
        leaves = params.leaves()
        Zv = Var(np.asarray(ad.value(Z)))
        c = self.costs[key](Zv, leaves)
        ad.backward(c)
        return float(ad.value(c)), ad.grad_of(Zv), params.flatten_grads(leaves)

    def total(self, result, params):
        """Sum of every cost on a :class:`~neuralgde.models.HybridResult` (tape-friendly)."""
        post = result.arc.post_states()
        out = 0.0
        for key, fn in self.costs.items():
            Z = result.query_state if key == "query" else post[key]
            out = ad.add(out, fn(Z, params))
        return out

    @classmethod
    def readout_mse(cls, m: HybridGDEModel, batch: HybridBatch, targets: dict, weight: float = 1.0):
        """Mean squared readout error against ``targets[k]`` (``k`` or ``"query"``)."""
        costs = {}
        for key, y in targets.items():
            k = batch.K - 1 if key == "query" else int(key)
            ops = batch.ops(k)
            y = np.asarray(y, dtype=np.float64)

            def cost(Z, w, ops=ops, y=y):
                resid = ad.sub(m.readout(Z, w, ops), y)
                return ad.mul(ad.mean(ad.square(resid)), weight)

            costs[key] = cost
        return cls(costs)


def hybrid_adjoint_grad(m: HybridGDEModel, params: ParamStore, batch: HybridBatch,
                        loss: TimestampedLoss, cfg: SolverConfig | None = None, Z_init=None,
                        replay: str = "auto") -> AdjointResult:
    """Loss and gradient over a hybrid arc by reverse traversal of its intervals."""
    cfg = cfg or SolverConfig("dopri5", rtol=1e-6, atol=1e-8)
    res = gcde_gru_forward(m, params, batch, Z_init, cfg)
    arc = res.arc
    K = batch.K
    n_theta = params.size
    grad = np.zeros(n_theta)
    total = 0.0
    n_evals = sum(s.n_field_evals for s in arc.segments)
    stored = 0
    lam = np.zeros_like(np.asarray(ad.value(arc.jumps[-1][1])))

    def pull_segment(k, seg, lam):
        nonlocal grad, n_evals, stored
        f, vjp = field_and_vjp(m.field, params, batch.ops(k), scale=batch.interval(k))
        lam, g, n, used = segment_adjoint(f, vjp, seg, lam, cfg, n_theta, replay)
        grad += g
        n_evals += n
        stored += int(used)
        return lam

    if "query" in loss.keys():
        if res.query_state is None:
            raise ValueError("the loss has a query term but the batch has no query times")
        v, dZ, dth = loss.evaluate("query", res.query_state, params)
        total += v
        grad += dth
        if res.query_segment is not None:
            lam = pull_segment(K - 1, res.query_segment, dZ)
        else:
            lam = dZ
    for k in reversed(range(K)):
        if k in loss.keys():
            v, dZ, dth = loss.evaluate(k, arc.jumps[k][1], params)
            total += v
            grad += dth
            lam = lam + dZ
        if m.jump is not None:
            pre = arc.jumps[k][0]
            lam, dth = jump_vjp(batch.ops(k).laplacian, pre, batch.features[:, k], m.jump, params, lam)
            grad += dth
        if k > 0 and m.field is not None:
            lam = pull_segment(k - 1, arc.segments[k - 1], lam)
    return AdjointResult(total, grad, lam, n_evals, stored)


# --------------------------------------------------------------------------- reference gradients


def backprop_value_and_grad(fn: Callable, params: ParamStore):
    """Differentiate ``fn(param_mapping) -> scalar`` on the tape (discretize-then-optimize)."""
    leaves = params.leaves()
    out = fn(leaves)
    ad.backward(out)
    return float(ad.value(out)), params.flatten_grads(leaves)


def finite_difference_grad(fn: Callable, theta, eps: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences of ``fn(theta) -> float`` at the chosen coordinates."""
    theta = np.asarray(theta, dtype=np.float64)
    idx = range(theta.size) if indices is None else indices
    out = np.zeros(theta.size)
    for i in idx:
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += eps
        tm[i] -= eps
        out[i] = (fn(tp) - fn(tm)) / (2.0 * eps)
    return out
