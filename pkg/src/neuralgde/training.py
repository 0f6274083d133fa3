"""Optimizer, learning-rate schedules, forecast metrics and the training loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .layers import ParamStore


# --------------------------------------------------------------------------- Adam


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **kw)


def adam_step(state: AdamState, theta, grad, lr: float):
    """Bias-corrected Adam update; returns ``(new_state, new_theta)``."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, moments {state.m.shape}")
    bad = ~np.isfinite(grad)
    if bad.any():
        i = int(np.argmax(bad))
        raise NonFiniteGradient(f"non-finite gradient entry at index {i}: {grad[i]}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_theta = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, state.beta1, state.beta2, state.eps), new_theta


# --------------------------------------------------------------------------- schedules


@dataclass(frozen=True)
class ScheduleSpec:
    """``constant``, ``cosine`` (warm restarts every ``T0`` epochs) or ``one_cycle``."""

    kind: str = "constant"
    lr_max: float = 1e-2
    lr_min: float = 0.0
    T0: int = 10
    peak_epoch: int = 0
    total: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine", "one_cycle"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.kind == "cosine" and self.T0 < 1:
            raise ValueError("T0 must be at least 1")
        if self.kind == "one_cycle" and not 0 <= self.peak_epoch < self.total:
            raise ValueError("one_cycle needs 0 <= peak_epoch < total")


def lr_schedule(spec: ScheduleSpec, epoch: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    lo, hi = spec.lr_min, spec.lr_max
    if spec.kind == "constant":
        return hi
    if spec.kind == "cosine":
        phase = (epoch % spec.T0) / spec.T0
        return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * phase))
    if epoch <= spec.peak_epoch:
        return lo + (hi - lo) * (epoch / spec.peak_epoch if spec.peak_epoch else 1.0)
    frac = min(1.0, (epoch - spec.peak_epoch) / (spec.total - spec.peak_epoch))
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsReport:
    mape: float
    mape_conventional: float
    rmse: float
    mse: float


def forecast_metrics(targets, predictions) -> MetricsReport:
    """Metrics over ``T x p`` arrays (extra trailing axes are flattened into ``p``).

    ``mape`` is ``100/(pT) * || sum_t (y_t - yhat_t) / y_t ||_1`` (signed errors
    summed over time before the absolute value), ``mape_conventional`` is the
    mean absolute percentage error, and ``rmse`` is the per-sensor RMSE over
    time averaged across sensors.
    """
    y = np.asarray(targets, dtype=np.float64)
    yh = np.asarray(predictions, dtype=np.float64)
    if y.shape != yh.shape:
        raise ValueError(f"targets {y.shape} and predictions {yh.shape} differ")
    if y.ndim == 1:
        y, yh = y[:, None], yh[:, None]
    y = y.reshape(y.shape[0], -1)
    yh = yh.reshape(yh.shape[0], -1)
    T, p = y.shape
    small = np.abs(y) < 1e-9
    if small.any():
        t, j = np.argwhere(small)[0]
        raise ZeroDivisionError(f"target at (t={t}, sensor={j}) is too close to zero for MAPE")
    err = y - yh
    rel = err / y
    mape = 100.0 / (p * T) * float(np.sum(np.abs(rel.sum(axis=0))))
    mape_conv = 100.0 * float(np.mean(np.abs(rel)))
    rmse = float(np.mean(np.sqrt(np.mean(err * err, axis=0))))
    mse = float(np.mean(err * err))
    return MetricsReport(mape, mape_conv, rmse, mse)


def extrapolation_rollout(step: Callable, nominal, k: int):
    """Self-fed ``k``-step rollouts, resynchronized to ``nominal`` after each block.

    ``step(state, i)`` predicts the state at index ``i + 1`` from a state
    standing in for index ``i``.  Returns ``(indices, predictions, targets)``
    for every predicted point.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    nominal = np.asarray(nominal)
    N = len(nominal)
    idx, preds, targets = [], [], []
    i = 0
    while i < N - 1:
        state = nominal[i]
        for j in range(1, k + 1):
            if i + j >= N:
                break
            state = step(state, i + j - 1)
            idx.append(i + j)
            preds.append(np.asarray(state))
            targets.append(nominal[i + j])
        i += k
    return np.array(idx), np.stack(preds), np.stack(targets)


def extrapolation_eval(step: Callable, nominal, k: int) -> MetricsReport:
    """Metrics over every point predicted by :func:`extrapolation_rollout`."""
    _, preds, targets = extrapolation_rollout(step, nominal, k)
    return forecast_metrics(targets.reshape(len(targets), -1), preds.reshape(len(preds), -1))


def absolute_percentage_errors(targets, predictions) -> np.ndarray:
    y = np.asarray(targets, dtype=np.float64)
    return 100.0 * np.abs((y - np.asarray(predictions)) / y)


# --------------------------------------------------------------------------- logging


METRICS_HEADER = ("epoch", "split", "loss", "mape", "rmse", "lr", "seconds")


class MetricsLog:
    """Appends ``epoch,split,loss,mape,rmse,lr,seconds`` rows to a CSV.

    ``seconds`` is written as 0 unless ``wall_clock`` is set, so that runs with
    the same seed produce byte-identical files.
    """

    def __init__(self, path, wall_clock: bool = False):
        self.path = Path(path)
        self.wall_clock = wall_clock
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)
        self._t0 = time.perf_counter()

    def write(self, epoch: int, split: str, loss=None, mape=None, rmse=None, lr=None):
        secs = time.perf_counter() - self._t0 if self.wall_clock else 0.0
        row = [epoch, split] + [_fmt(v) for v in (loss, mape, rmse, lr, secs)]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# --------------------------------------------------------------------------- loop


@dataclass
class FitResult:
    params: ParamStore
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)


def fit(value_and_grad: Callable, params: ParamStore, epochs: int, schedule: ScheduleSpec,
        log: MetricsLog | None = None, evaluate: Callable | None = None, trainable=None,
        grad_clip: float | None = None) -> FitResult:
    """Full-batch Adam loop.

    ``value_and_grad(params) -> (loss, grad)``; ``evaluate(params)`` returns
    ``{split: MetricsReport | float}`` and runs after the last epoch (and
    before training when ``epochs == 0``).  ``trainable`` masks which
    coordinates of theta move.
    """
    params = params.copy()
    state = AdamState.zeros(params.size)
    out = FitResult(params)
    for epoch in range(epochs):
        lr = lr_schedule(schedule, epoch)
        loss, grad = value_and_grad(params)
        if trainable is not None:
            grad = np.where(trainable, grad, 0.0)
        if grad_clip is not None:
            norm = float(np.linalg.norm(grad))
            if norm > grad_clip:
                grad = grad * (grad_clip / norm)
        state, theta = adam_step(state, params.theta, grad, lr)
        params.theta[...] = theta
        out.losses.append(float(loss))
        if log is not None:
            log.write(epoch, "train", loss=loss, lr=lr)
    if evaluate is not None:
        report = evaluate(params)
        out.evals.append(report)
        if log is not None:
            for split, r in report.items():
                if isinstance(r, MetricsReport):
                    log.write(epochs, split, loss=r.mse, mape=r.mape_conventional, rmse=r.rmse)
                else:
                    log.write(epochs, split, loss=r)
    return out
