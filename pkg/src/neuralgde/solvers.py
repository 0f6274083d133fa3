"""ODE and Stratonovich SDE integrators for matrix-valued states.

Fixed-step and Euler-Heun integrators only use ``+``, ``-`` and scalar/array
products on the state, so they also run on :class:`~neuralgde.autodiff.Var`
states and record a tape (discretize-then-optimize gradients).  Step-size
decisions always look at plain values.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .numerics import RngStream, keyed_normal

_METHODS = ("euler", "rk4", "dopri5", "euler_heun")


class SolverError(RuntimeError):
    """Integration failure; ``partial`` holds the trajectory computed so far."""

    def __init__(self, message: str, partial: "Trajectory | None" = None, step: int | None = None):
        super().__init__(message)
        self.partial = partial
        self.step = step


@dataclass
class SolverConfig:
    method: str = "rk4"
    h: float = 0.1
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 100_000
    adaptive: bool = False  # only read by euler_heun
    h_min: float = 1e-6
    h_max: float | None = None

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown solver {self.method!r}; expected one of {_METHODS}")
        if not self.h > 0:
            raise ValueError(f"step size must be positive, got {self.h}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")

    @property
    def order(self) -> int:
        return {"euler": 1, "rk4": 4}.get(self.method, 0)


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    n_field_evals: int = 0

    @property
    def final(self):
        return self.states[-1]

    @property
    def n_steps(self) -> int:
        return max(len(self.times) - 1, 0)

    def state_at(self, t: float, tol: float = 1e-9):
        """State stored at time ``t`` (must be a step endpoint)."""
        times = np.asarray(self.times)
        i = int(np.argmin(np.abs(times - t)))
        if abs(times[i] - t) > tol * max(1.0, abs(t)):
            raise KeyError(f"no stored state at t={t}")
        return self.states[i]

    def values(self) -> np.ndarray:
        return np.stack([ad.value(s) for s in self.states])


def _check(Z, step: int, traj: Trajectory):
    v = ad.value(Z)
    if not np.all(np.isfinite(v)):
        raise SolverError(f"non-finite state at step {step}", traj, step)


def _breakpoints(t0: float, t1: float, t_eval) -> list[float]:
    """Interior times the integrator must land on exactly, in travel order."""
    if t_eval is None:
        return []
    lo, hi = min(t0, t1), max(t0, t1)
    pts = sorted({float(t) for t in t_eval if lo < float(t) < hi}, reverse=t1 < t0)
    return pts


def fixed_grid(t0: float, t1: float, h: float, t_eval=None) -> list[float]:
    """Step endpoints from ``t0`` to ``t1`` with step ``h`` (last step shortened)."""
    span = t1 - t0
    sign = 1.0 if span >= 0 else -1.0
    n = max(1, int(math.ceil(abs(span) / h - 1e-9)))
    grid = [t0 + sign * h * i for i in range(n)] + [t1]
    if t_eval is not None:
        extra = _breakpoints(t0, t1, t_eval)
        grid = sorted(set(grid) | set(extra), reverse=sign < 0)
    return grid


# --------------------------------------------------------------------------- fixed step


def euler_step(field, t, Z, h):
    return Z + h * field(t, Z)


def rk4_step(field, t, Z, h):
    k1 = field(t, Z)
    k2 = field(t + 0.5 * h, Z + (0.5 * h) * k1)
    k3 = field(t + 0.5 * h, Z + (0.5 * h) * k2)
    k4 = field(t + h, Z + h * k3)
    return Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_fixed(field: Callable, Z0, span, cfg: SolverConfig, t_eval=None) -> Trajectory:
    """Explicit Euler or classical RK4 from ``span[0]`` to ``span[1]`` (either direction)."""
    if cfg.method not in ("euler", "rk4"):
        raise ValueError(f"integrate_fixed handles euler/rk4, not {cfg.method}")
    step = euler_step if cfg.method == "euler" else rk4_step
    t0, t1 = float(span[0]), float(span[1])
    grid = fixed_grid(t0, t1, cfg.h, t_eval)
    traj = Trajectory([t0], [Z0], 0)
    Z = Z0
    for i in range(len(grid) - 1):
        if i >= cfg.max_steps:
            raise SolverError(f"max_steps={cfg.max_steps} exceeded", traj, i)
        h = grid[i + 1] - grid[i]
        Z = step(field, grid[i], Z, h)
        traj.n_field_evals += cfg.order
        traj.times.append(grid[i + 1])
        traj.states.append(Z)
        _check(Z, i, traj)
    return traj


# --------------------------------------------------------------------------- Dormand-Prince

_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = _A[6]
# fifth-order weights minus the embedded fourth-order weights
_E = (
    71 / 57600,
    0.0,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _initial_step(field, t0, y0, f0, direction, rtol, atol) -> tuple[float, int]:
    scale = atol + rtol * np.abs(y0)
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = field(t0 + direction * h0, y1)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100.0 * h0, h1), 1


def integrate_dopri5(field: Callable, Z0, span, cfg: SolverConfig, t_eval=None) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) with a PI step-size controller.

    Steps are clamped so every time in ``t_eval`` is an accepted step endpoint.
    """
    t0, t1 = float(span[0]), float(span[1])
    traj = Trajectory([t0], [Z0], 0)
    if t0 == t1:
        return traj
    direction = 1.0 if t1 > t0 else -1.0
    stops = _breakpoints(t0, t1, t_eval) + [t1]
    rtol, atol = cfg.rtol, cfg.atol
    safety, fac_min, fac_max = 0.9, 0.2, 10.0
    beta = 0.04
    alpha = 0.2 - 0.75 * beta
    err_prev = 1e-4

    y = ad.value(Z0)
    t = t0
    f = field(t, y)
    traj.n_field_evals += 1
    h_abs, extra = _initial_step(field, t, y, f, direction, rtol, atol)
    traj.n_field_evals += extra
    if cfg.h_max is not None:
        h_abs = min(h_abs, cfg.h_max)
    stop_i = 0
    n_steps = 0
    while stop_i < len(stops):
        target = stops[stop_i]
        if n_steps >= cfg.max_steps:
            raise SolverError(f"max_steps={cfg.max_steps} exceeded at t={t}", traj, n_steps)
        remaining = abs(target - t)
        clamped = h_abs >= remaining * (1.0 - 1e-12)
        h = direction * (remaining if clamped else h_abs)
        k = [f]
        for i in range(1, 7):
            yi = y
            for aij, kj in zip(_A[i], k):
                if aij != 0.0:
                    yi = yi + (h * aij) * kj
            k.append(field(t + _C[i] * h, yi))
        traj.n_field_evals += 6
        y_new = y
        for bi, ki in zip(_B, k[:6]):
            if bi != 0.0:
                y_new = y_new + (h * bi) * ki
        err_vec = sum((h * ei) * ki for ei, ki in zip(_E, k) if ei != 0.0)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = _rms(err_vec / scale)
        n_steps += 1
        if not np.isfinite(err):
            raise SolverError(f"non-finite error estimate at t={t}", traj, n_steps)
        if err <= 1.0:
            t = target if clamped else t + h
            y = y_new
            f = k[6]
            traj.times.append(t)
            traj.states.append(y)
            if clamped:
                stop_i += 1
            if err == 0.0:
                fac = fac_max
            else:
                fac = safety * err ** (-alpha) * err_prev**beta
                fac = min(fac_max, max(fac_min, fac))
            err_prev = max(err, 1e-4)
            # clamped steps say nothing about the natural step size
            if not clamped or abs(h) >= h_abs:
                h_abs = abs(h) * fac
        else:
            h_abs = abs(h) * max(fac_min, safety * err ** (-alpha))
        if cfg.h_max is not None:
            h_abs = min(h_abs, cfg.h_max)
        if h_abs < 1e-14 * max(1.0, abs(t)):
            raise SolverError(f"step size underflow at t={t}", traj, n_steps)
    return traj


def integrate(field: Callable, Z0, span, cfg: SolverConfig, t_eval=None) -> Trajectory:
    if cfg.method in ("euler", "rk4"):
        return integrate_fixed(field, Z0, span, cfg, t_eval)
    if cfg.method == "dopri5":
        return integrate_dopri5(field, Z0, span, cfg, t_eval)
    raise ValueError("use integrate_euler_heun for SDEs")


# --------------------------------------------------------------------------- Brownian motion


def _float_bits(x: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", float(x)))[0]


class BrownianPath:
    """Reproducible Brownian motion on ``[t0, t1]`` built by dyadic bridge refinement.

    ``B(t0) = 0``.  Midpoint values are drawn from the bridge law of their
    parent interval using normals addressed by the node index, so the value at
    any dyadic time never depends on query order.  Below ``max_depth`` levels a
    non-dyadic time is bridged inside its leaf interval with a draw keyed by
    the bit pattern of ``t``.
    """

    def __init__(self, rng: RngStream, shape, t0: float = 0.0, t1: float = 1.0, max_depth: int = 20):
        if not t1 > t0:
            raise ValueError("BrownianPath needs t1 > t0")
        self.seed = rng.seed
        self.stream_id = rng.stream_id
        self.shape = tuple(shape)
        self.t0 = float(t0)
        self.t1 = float(t1)
        self.max_depth = int(max_depth)
        self._end = math.sqrt(self.t1 - self.t0) * self._normal(0)
        self._mid: dict[int, np.ndarray] = {}
        self._leaf: dict[tuple[int, int], np.ndarray] = {}

    def _normal(self, counter: int) -> np.ndarray:
        return keyed_normal(self.seed, self.stream_id, counter, self.shape)

    def value(self, t: float) -> np.ndarray:
        t = float(t)
        tol = 1e-13 * (self.t1 - self.t0)
        if t < self.t0 - tol or t > self.t1 + tol:
            raise ValueError(f"t={t} outside the Brownian span [{self.t0}, {self.t1}]")
        if abs(t - self.t0) <= tol:
            return np.zeros(self.shape)
        if abs(t - self.t1) <= tol:
            return self._end
        a, b = self.t0, self.t1
        Ba, Bb = np.zeros(self.shape), self._end
        node = 1
        for _ in range(self.max_depth):
            m = 0.5 * (a + b)
            Bm = self._mid.get(node)
            if Bm is None:
                Bm = 0.5 * (Ba + Bb) + math.sqrt(0.25 * (b - a)) * self._normal(node)
                self._mid[node] = Bm
            if abs(t - m) <= tol:
                return Bm
            if t < m:
                node, b, Bb = 2 * node, m, Bm
            else:
                node, a, Ba = 2 * node + 1, m, Bm
        key = (node, _float_bits(t))
        val = self._leaf.get(key)
        if val is None:
            w = (t - a) / (b - a)
            sd = math.sqrt((t - a) * (b - t) / (b - a))
            counter = (1 << 127) | (_float_bits(t) << 48) | (node & ((1 << 48) - 1))
            val = Ba + w * (Bb - Ba) + sd * self._normal(counter)
            self._leaf[key] = val
        return val


def brownian_increment(path: BrownianPath, s: float, t: float) -> np.ndarray:
    """``B(t) - B(s)`` for ``s < t``."""
    if not s < t:
        raise ValueError(f"brownian_increment needs s < t, got s={s}, t={t}")
    return path.value(t) - path.value(s)


# --------------------------------------------------------------------------- Euler-Heun


def heun_step(drift, diffusion, t, Z, h, dB):
    """One Stratonovich Heun predictor-corrector step."""
    f0 = drift(t, Z)
    g0 = diffusion(t, Z)
    Zbar = Z + h * f0 + g0 * dB
    f1 = drift(t + h, Zbar)
    g1 = diffusion(t + h, Zbar)
    return Z + (0.5 * h) * (f0 + f1) + 0.5 * (g0 + g1) * dB


def integrate_euler_heun(
    drift: Callable, diffusion: Callable, Z0, span, path: BrownianPath, cfg: SolverConfig, t_eval=None
) -> Trajectory:
    """Integrate ``dZ = f dt + g o dB`` (diagonal noise) with Heun steps.

    With ``cfg.adaptive`` the step is chosen by step doubling: one step of
    size ``h`` is compared with two of ``h/2`` over the same increments; the
    two-half-step result is kept when the RMS gap is within ``atol + rtol|Z|``.
    ``n_field_evals`` counts drift and diffusion evaluations together.
    """
    t0, t1 = float(span[0]), float(span[1])
    if t1 <= t0:
        raise ValueError("integrate_euler_heun runs forward in time only")
    traj = Trajectory([t0], [Z0], 0)
    stops = _breakpoints(t0, t1, t_eval) + [t1]
    t, Z = t0, Z0
    h_max = cfg.h_max if cfg.h_max is not None else (t1 - t0)
    h_next = min(cfg.h, h_max)
    stop_i = 0
    n_steps = 0
    tol_t = 1e-12 * max(1.0, abs(t1))
    while stop_i < len(stops):
        target = stops[stop_i]
        if n_steps >= cfg.max_steps:
            raise SolverError(f"max_steps={cfg.max_steps} exceeded at t={t}", traj, n_steps)
        remaining = target - t
        clamped = h_next >= remaining - tol_t
        h = remaining if clamped else h_next
        t_new = target if clamped else t + h
        n_steps += 1
        if not cfg.adaptive:
            dB = brownian_increment(path, t, t_new)
            Z = heun_step(drift, diffusion, t, Z, h, dB)
            traj.n_field_evals += 4
        else:
            tm = t + 0.5 * h
            dB1 = brownian_increment(path, t, tm)
            dB2 = brownian_increment(path, tm, t_new)
            full = heun_step(drift, diffusion, t, ad.value(Z), h, dB1 + dB2)
            half = heun_step(drift, diffusion, t, Z, 0.5 * h, dB1)
            half = heun_step(drift, diffusion, tm, half, 0.5 * h, dB2)
            traj.n_field_evals += 12
            zv = ad.value(half)
            scale = cfg.atol + cfg.rtol * np.maximum(np.abs(ad.value(Z)), np.abs(zv))
            err = _rms((zv - full) / scale)
            if not np.isfinite(err):
                raise SolverError(f"non-finite state at t={t}", traj, n_steps)
            if err > 1.0 and h > cfg.h_min * (1 + 1e-9):
                h_next = max(0.5 * h, cfg.h_min)
                continue
            Z = half
            if err < 0.25 and not clamped:
                h_next = min(2.0 * h, h_max)
            elif not clamped:
                h_next = h
        t = t_new
        traj.times.append(t)
        traj.states.append(Z)
        _check(Z, n_steps, traj)
        if clamped:
            stop_i += 1
    return traj
