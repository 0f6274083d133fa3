import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralgde.layers import AffineSpec, ParamStore
from neuralgde.numerics import RngStream
from neuralgde.training import (
    METRICS_HEADER,
    AdamState,
    MetricsLog,
    MetricsReport,
    NonFiniteGradient,
    ScheduleSpec,
    absolute_percentage_errors,
    adam_step,
    extrapolation_eval,
    extrapolation_rollout,
    fit,
    forecast_metrics,
    lr_schedule,
)

# --------------------------------------------------------------------------- Adam


def test_zero_gradient_leaves_theta():
    s = AdamState.zeros(3)
    s2, th = adam_step(s, np.ones(3), np.zeros(3), 0.1)
    np.testing.assert_array_equal(th, np.ones(3))
    assert s2.t == 1


def test_first_step_is_signed_lr():
    g = np.array([3.0, -0.5, 1e-3, -200.0])
    _, th = adam_step(AdamState.zeros(4), np.zeros(4), g, 0.01)
    np.testing.assert_allclose(th, -0.01 * np.sign(g), atol=1e-6)


def test_quadratic_convergence():
    s, th = AdamState.zeros(1), np.array([1.0])
    for _ in range(500):
        s, th = adam_step(s, th, th, 0.1)
    assert abs(th[0]) < 1e-3


def test_doubling_lr_doubles_first_update():
    g = RngStream(0).normal(size=5)
    _, a = adam_step(AdamState.zeros(5), np.zeros(5), g, 0.01)
    _, b = adam_step(AdamState.zeros(5), np.zeros(5), g, 0.02)
    np.testing.assert_array_equal(b, 2.0 * a)


def test_second_moment_nonnegative():
    s, th = AdamState.zeros(4), np.zeros(4)
    rng = RngStream(1)
    for _ in range(20):
        s, th = adam_step(s, th, rng.normal(size=4), 0.01)
        assert np.all(s.v >= 0)


def test_non_finite_gradient_named():
    with pytest.raises(NonFiniteGradient, match="index 2"):
        adam_step(AdamState.zeros(4), np.zeros(4), np.array([0.0, 1.0, np.nan, np.inf]), 0.1)
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(3), np.zeros(4), np.zeros(4), 0.1)


# --------------------------------------------------------------------------- schedules


def test_cosine_examples():
    spec = ScheduleSpec("cosine", lr_max=1e-2, lr_min=1e-4, T0=10)
    assert lr_schedule(spec, 0) == 1e-2
    assert abs(lr_schedule(spec, 5) - (1e-2 + 1e-4) / 2) < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 500))
def test_cosine_periodic(epoch):
    spec = ScheduleSpec("cosine", lr_max=1e-2, lr_min=1e-3, T0=10)
    assert abs(lr_schedule(spec, epoch) - lr_schedule(spec, epoch + 10)) < 1e-12
    assert 1e-3 - 1e-15 <= lr_schedule(spec, epoch) <= 1e-2 + 1e-15


def test_one_cycle_examples_and_shape():
    spec = ScheduleSpec("one_cycle", lr_max=1e-2, lr_min=4e-4, peak_epoch=300, total=1000)
    assert lr_schedule(spec, 300) == 1e-2
    assert abs(lr_schedule(spec, 1000) - 4e-4) < 1e-15
    assert lr_schedule(spec, 0) == 4e-4
    lrs = np.array([lr_schedule(spec, e) for e in np.linspace(0, 1000, 2001)])
    up, down = lrs[:601], lrs[600:]
    assert np.all(np.diff(up) >= 0) and np.all(np.diff(down) <= 0)
    assert np.max(np.abs(np.diff(lrs))) < 1e-4


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleSpec("step")
    with pytest.raises(ValueError):
        ScheduleSpec("cosine", lr_max=1e-3, lr_min=1e-2)
    with pytest.raises(ValueError):
        ScheduleSpec("one_cycle", peak_epoch=10, total=10)
    with pytest.raises(ValueError):
        lr_schedule(ScheduleSpec(), -1)


# --------------------------------------------------------------------------- metrics


def test_perfect_predictions():
    y = RngStream(2).uniform(1, 2, size=(5, 3))
    r = forecast_metrics(y, y)
    assert (r.mape, r.mape_conventional, r.rmse, r.mse) == (0.0, 0.0, 0.0, 0.0)


def test_single_term():
    r = forecast_metrics(np.array([[100.0]]), np.array([[90.0]]))
    assert abs(r.mape - 10.0) < 1e-12 and abs(r.mape_conventional - 10.0) < 1e-12
    assert abs(r.rmse - 10.0) < 1e-12


def test_rmse_per_sensor_then_average():
    r = forecast_metrics(np.array([[1.0, 1.0]]), np.array([[-2.0, -3.0]]))
    assert r.rmse == 3.5
    assert r.mse == 12.5


def test_printed_mape_cancels_signed_errors():
    y = np.array([[10.0], [10.0]])
    r = forecast_metrics(y, np.array([[11.0], [9.0]]))
    assert r.mape == 0.0
    assert abs(r.mape_conventional - 10.0) < 1e-12


def test_metrics_sensor_permutation_invariant():
    rng = RngStream(3)
    y = rng.uniform(1, 3, size=(6, 5))
    yh = y + rng.normal(size=(6, 5))
    perm = rng.permutation(5)
    a, b = forecast_metrics(y, yh), forecast_metrics(y[:, perm], yh[:, perm])
    for f in ("mape", "mape_conventional", "rmse", "mse"):
        assert abs(getattr(a, f) - getattr(b, f)) < 1e-12


def test_metrics_errors():
    with pytest.raises(ZeroDivisionError, match="t=1"):
        forecast_metrics(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        forecast_metrics(np.ones(3), np.ones(4))


# --------------------------------------------------------------------------- extrapolation protocol


def test_perfect_one_step_model():
    nominal = np.cumsum(np.ones(10)) + 1.0
    assert extrapolation_eval(lambda s, i: nominal[i + 1], nominal, 1).mape_conventional == 0.0


@pytest.mark.parametrize("k", [1, 2, 5])
def test_identity_model_on_constant_trajectory(k):
    nominal = np.full((8, 2), 3.0)
    assert extrapolation_eval(lambda s, i: s, nominal, k).mape_conventional == 0.0


def test_identity_model_resync_hand_rollout():
    nominal = np.arange(1.0, 6.0)  # x(t) = t on a unit grid
    idx, preds, targets = extrapolation_rollout(lambda s, i: s, nominal, 2)
    np.testing.assert_array_equal(idx, [1, 2, 3, 4])
    np.testing.assert_array_equal(preds, [1, 1, 3, 3])
    np.testing.assert_array_equal(targets, [2, 3, 4, 5])
    np.testing.assert_allclose(absolute_percentage_errors(targets, preds), [50.0, 200 / 3, 25.0, 40.0])


def test_extrapolation_requires_positive_k():
    with pytest.raises(ValueError):
        extrapolation_rollout(lambda s, i: s, np.ones(3), 0)


# --------------------------------------------------------------------------- loop and logging


def quadratic_problem():
    spec = AffineSpec("a", 2, 1)
    params = ParamStore.build(spec, rng=RngStream(4))
    target = np.array([0.5, -1.0, 2.0])

    def vg(p):
        return 0.5 * float(np.sum((p.theta - target) ** 2)), p.theta - target

    return params, target, vg


def test_fit_converges_and_logs(tmp_path):
    params, target, vg = quadratic_problem()
    log = MetricsLog(tmp_path / "m.csv")
    evaluate = lambda p: {"test": MetricsReport(1.0, 2.0, 3.0, 4.0), "val": 0.25}
    res = fit(vg, params, 300, ScheduleSpec("constant", 0.05), log, evaluate)
    np.testing.assert_allclose(res.params.theta, target, atol=1e-2)
    assert res.losses[-1] < res.losses[0]
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert tuple(rows[0]) == METRICS_HEADER
    assert len(rows) == 1 + 300 + 2
    assert all(r[-1] == "0.0" for r in rows[1:])
    assert rows[-2][:2] == ["300", "test"] and rows[-2][3] == "2.0"


def test_fit_does_not_touch_input_params():
    params, _, vg = quadratic_problem()
    before = params.theta.copy()
    fit(vg, params, 5, ScheduleSpec())
    np.testing.assert_array_equal(params.theta, before)


def test_fit_trainable_mask_and_clip():
    params, _, vg = quadratic_problem()
    mask = np.array([True, False, True])
    res = fit(vg, params, 10, ScheduleSpec(), trainable=mask, grad_clip=1e-3)
    assert res.params.theta[1] == params.theta[1]
    assert res.params.theta[0] != params.theta[0]


def test_zero_epochs_evaluates_only(tmp_path):
    params, _, vg = quadratic_problem()
    res = fit(vg, params, 0, ScheduleSpec(), evaluate=lambda p: {"test": 1.5})
    np.testing.assert_array_equal(res.params.theta, params.theta)
    assert res.losses == [] and res.evals == [{"test": 1.5}]


def test_metrics_log_byte_identical(tmp_path):
    params, _, vg = quadratic_problem()
    for name in ("a.csv", "b.csv"):
        fit(vg, params, 20, ScheduleSpec("cosine", 0.01, T0=5), MetricsLog(tmp_path / name))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_wall_clock_column(tmp_path):
    log = MetricsLog(tmp_path / "w.csv", wall_clock=True)
    log.write(0, "train", loss=1.0)
    row = list(csv.reader(open(tmp_path / "w.csv")))[1]
    assert float(row[-1]) >= 0.0 and row[3] == ""
    assert math.isfinite(float(row[-1]))
