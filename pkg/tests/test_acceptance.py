"""The 13 acceptance criteria at their stated tolerances and runtime bounds.

Each test prints one ``criterion N: PASS|FAIL`` line; the lines are also
collected and repeated in the pytest terminal summary.
"""

import csv
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES
from neuralgde import autodiff as ad
from neuralgde import experiments as ex
from neuralgde.cli import main
from neuralgde.datagen import (
    ParticleParams,
    bernoulli_mask,
    first_peak_time,
    mean_field,
    pair_forces,
    particle_energy,
    repressilator_network,
    simulate_multi_particle,
    tau_leap_repressilator,
)
from neuralgde.models import PosteriorParams, kl_standard_normal
from neuralgde.numerics import RngStream
from neuralgde.solvers import BrownianPath, SolverConfig, integrate_dopri5, integrate_euler_heun, integrate_fixed
from neuralgde.training import absolute_percentage_errors, extrapolation_rollout, forecast_metrics


def report(n, title, ok, detail, seconds, bound):
    ok = bool(ok) and seconds < bound
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {title} | {detail} | {seconds:.1f}s (bound {bound:.0f}s)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def reproduce(experiment, out, seeds, *extra):
    argv = ["reproduce", experiment, "--output-dir", str(out), *extra]
    for s in seeds:
        argv += ["--seed", str(s)]
    assert main(argv) == 0


# --------------------------------------------------------------------------- 1-2 gradients


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    errs = ex.gradient_checks(seed=0)
    worst = max(errs.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
    report(1, "gradients vs finite differences", set(errs) == set(ex.GRADIENT_CHECKS) and worst < 1e-4,
           detail, time.perf_counter() - t0, 120)


def test_criterion_02_hybrid_adjoint_equivalence():
    t0 = time.perf_counter()
    adj, bp = ex.hybrid_equivalence(seed=0)
    err = ex.relative_error(adj, bp)
    report(2, "hybrid adjoint vs unrolled backprop", err < 1e-4, f"rel_err={err:.1e}", time.perf_counter() - t0, 60)


# --------------------------------------------------------------------------- 3-4 solvers


def test_criterion_03_solver_orders():
    t0 = time.perf_counter()
    hs = np.array([0.1, 0.05, 0.025, 0.0125])
    slopes = {}
    for method in ("euler", "rk4"):
        errs = [abs(integrate_fixed(lambda t, z: -z, np.array([1.0]), (0.0, 1.0), SolverConfig(method, h=h)).final[0]
                    - math.exp(-1.0)) for h in hs]
        slopes[method] = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    rot = np.array([[0.0, 1.0], [-1.0, 0.0]])
    Z0 = np.array([[1.0], [0.25]])
    traj = integrate_dopri5(lambda t, z: rot @ z, Z0, (0.0, math.pi / 2), SolverConfig("dopri5", rtol=1e-8, atol=1e-8))
    series = sum(np.linalg.matrix_power(rot * math.pi / 2, k) / math.factorial(k) for k in range(40))
    rot_err = float(np.max(np.abs(traj.final - series @ Z0)))
    ok = abs(slopes["euler"] - 1.0) <= 0.1 and abs(slopes["rk4"] - 4.0) <= 0.2 and rot_err < 1e-6
    report(3, "solver orders", ok,
           f"euler={slopes['euler']:.3f} rk4={slopes['rk4']:.3f} dopri5_rot_err={rot_err:.1e}",
           time.perf_counter() - t0, 60)


def test_criterion_04_stratonovich_discrimination():
    t0 = time.perf_counter()
    worst_strat, closest_ito, used = 0.0, math.inf, 0
    for seed in range(10):
        path = BrownianPath(RngStream(seed, 5), (1,), 0.0, 1.0)
        B1 = float(path.value(1.0)[0])
        if abs(B1) >= 2:
            continue
        z1 = integrate_euler_heun(lambda t, z: np.zeros_like(z), lambda t, z: z, np.array([1.0]), (0.0, 1.0),
                                  path, SolverConfig("euler_heun", h=1e-3)).final[0]
        worst_strat = max(worst_strat, abs(z1 - math.exp(B1)))
        closest_ito = min(closest_ito, abs(z1 - math.exp(B1 - 0.5)))
        used += 1
    ok = used > 0 and worst_strat < 1e-2 and closest_ito >= 1e-2
    report(4, "Stratonovich discrimination", ok,
           f"paths={used} max|z-exp(B)|={worst_strat:.1e} min|z-exp(B-1/2)|={closest_ito:.2f}",
           time.perf_counter() - t0, 60)


# --------------------------------------------------------------------------- 5 particle physics


def test_criterion_05_particle_physics():
    t0 = time.perf_counter()
    p = ParticleParams()
    roll = simulate_multi_particle(p, rng=RngStream(0, 1))
    antisym = all(np.array_equal(F, -np.swapaxes(F, 0, 1))
                  for F in (pair_forces(s, a, p) for s, a in zip(roll.states, roll.adjacency)))
    N = 6283
    one = simulate_multi_particle(ParticleParams(n=1), T=2 * math.pi, dt=2 * math.pi / N,
                                  Z_init=np.array([[1.0, 0.5, 0.0, 0.0]]))
    ret = abs(np.linalg.norm(one.states[-1, 0, :2]) - np.linalg.norm([1.0, 0.5]))
    # the spring set is held fixed within a step, so each step is compared under its own graph
    rise = max(particle_energy(roll.states[k + 1], roll.adjacency[k], p)
               - particle_energy(roll.states[k], roll.adjacency[k], p) for k in range(len(roll) - 1))
    ok = antisym and ret < 1e-5 and rise <= 1e-6
    report(5, "multi-particle physics", ok,
           f"antisymmetric={antisym} period_return_err={ret:.1e} max_energy_rise={rise:.1e}",
           time.perf_counter() - t0, 120)


# --------------------------------------------------------------------------- 6-8 experiments


def _mean_by(rows, key, value, where=lambda r: True):
    out = {}
    for r in rows:
        if where(r):
            out.setdefault(r[key], []).append(float(r[value]))
    return {k: float(np.mean(v)) for k, v in out.items()}


@pytest.mark.slow
def test_criterion_06_particle_ordering(tmp_path):
    t0 = time.perf_counter()
    reproduce("particles", tmp_path / "p", [0, 1, 2])
    m = _mean_by(read(tmp_path / "p" / "mape.csv"), "model", "mape", lambda r: r["k"] == "5")
    ok = m["gcde"] < 0.5 * m["neural_ode"] < m["static"]
    report(6, "multi-particle 5-step MAPE ordering", ok,
           f"gcde={m['gcde']:.1f} neural_ode={m['neural_ode']:.1f} static={m['static']:.1f}",
           time.perf_counter() - t0, 1800)


@pytest.mark.slow
def test_criterion_07_hybrid_ordering(tmp_path):
    t0 = time.perf_counter()
    reproduce("hybrid_forecast", tmp_path / "h", [0, 1, 2, 3, 4])
    m = _mean_by(read(tmp_path / "h" / "results.csv"), "model", "mape", lambda r: float(r["keep_prob"]) == 0.3)
    ok = m["gcde_gru"] <= m["gcgru"] < m["gru"] and m["gcde_gru"] < m["gru"]
    report(7, "hybrid forecasting MAPE ordering", ok,
           f"gcde_gru={m['gcde_gru']:.2f} gcgru={m['gcgru']:.2f} gru={m['gru']:.2f}", time.perf_counter() - t0, 1800)


@pytest.mark.slow
def test_criterion_08_oversmoothing(tmp_path):
    t0 = time.perf_counter()
    reproduce("oversmoothing", tmp_path / "o", [0, 1, 2, 3, 4])
    acc = _mean_by(read(tmp_path / "o" / "results.csv"), "span", "accuracy")
    a1, a10 = acc["1.0"], acc["10.0"]
    report(8, "oversmoothing robustness", abs(a10 - a1) <= 0.03, f"acc(S=1)={a1:.4f} acc(S=10)={a10:.4f}",
           time.perf_counter() - t0, 900)


# --------------------------------------------------------------------------- 9-10 repressilator


def test_criterion_09_tau_leaping():
    t0 = time.perf_counter()
    ts, counts = tau_leap_repressilator(rng=RngStream(0, 1), n_runs=200)
    tm, xm = mean_field(repressilator_network(), 300.0)
    ref = first_peak_time(tm, xm[:, 0])
    got = first_peak_time(ts, counts[..., 0].mean(axis=0))
    start = bool(np.all(counts[:, 0] == [0, 0, 0, 0, 20, 0]))
    ok = abs(got - ref) <= 0.1 * ref and start
    report(9, "tau-leaping fidelity", ok, f"ensemble_peak={got:.2f}s mean_field_peak={ref:.2f}s initial_exact={start}",
           time.perf_counter() - t0, 180)


@pytest.mark.slow
def test_criterion_10_elbo():
    t0 = time.perf_counter()
    kl0 = float(ad.value(kl_standard_normal(PosteriorParams(np.zeros((4, 1)), np.zeros((4, 1))))))
    kl1 = float(ad.value(kl_standard_normal(PosteriorParams(np.ones(1), np.zeros(1)))))
    data = ex.repressilator_data(0, n_traj=2)
    _, _, losses = ex.train_latent_model(data, seed=0, epochs=50)
    first, last = np.mean(losses[:5]), np.mean(losses[-5:])
    ok = abs(kl0) <= 1e-12 and abs(kl1 - 0.5) <= 1e-12 and last < first
    report(10, "ELBO components and descent", ok,
           f"KL(prior)={kl0:.1e} KL(mu=1)={kl1:.12f} loss first5={first:.1f} last5={last:.1f}",
           time.perf_counter() - t0, 1200)


# --------------------------------------------------------------------------- 11-12 sampling and metrics


def test_criterion_11_undersampling():
    t0 = time.perf_counter()
    n = 10_000
    fracs = {}
    ok = True
    for i, p in enumerate((0.3, 0.5, 0.7)):
        kept = bernoulli_mask(n, p, RngStream(i, 4)).sum()
        fracs[p] = kept / n
        ok &= abs(kept - n * p) <= 3 * math.sqrt(n * p * (1 - p)) + 1
    mask = bernoulli_mask(20_001, 0.5, RngStream(9, 4))
    d = np.diff(np.nonzero(mask)[0])[:10_000]
    ks = np.arange(1, 9)
    observed = np.array([np.sum(d == k) for k in ks] + [np.sum(d >= 9)])
    expected = np.append(stats.geom.pmf(ks, 0.5), stats.geom.sf(8, 0.5)) * len(d)
    pval = stats.chisquare(observed, expected).pvalue
    ok &= pval > 0.01
    report(11, "undersampling law", ok,
           " ".join(f"p={p}:{f:.4f}" for p, f in fracs.items()) + f" geometric_pvalue={pval:.3f}",
           time.perf_counter() - t0, 60)


def test_criterion_12_metrics_and_eval_counts():
    t0 = time.perf_counter()
    a = forecast_metrics(np.array([[100.0]]), np.array([[90.0]]))
    b = forecast_metrics(np.array([[1.0, 1.0]]), np.array([[-2.0, -3.0]]))
    _, preds, targets = extrapolation_rollout(lambda s, i: s, np.arange(1.0, 6.0), 2)
    apes = absolute_percentage_errors(targets, preds)
    metrics_ok = (a.mape == 10.0 and a.rmse == 10.0 and b.rmse == 3.5
                  and np.allclose(apes, [50.0, 200.0 / 3.0, 25.0, 40.0], rtol=0, atol=1e-12))
    counts_ok = True
    for method, k in (("euler", 1), ("rk4", 4)):
        for S, eps in ((1.0, 0.1), (3.0, 0.7), (2.0, 0.25), (10.0, 0.3)):
            tr = integrate_fixed(lambda t, z: -z, np.ones(2), (0.0, S), SolverConfig(method, h=eps))
            counts_ok &= tr.n_field_evals == k * math.ceil(S / eps - 1e-9)
    report(12, "metric formulas and eval counts", metrics_ok and counts_ok,
           f"mape={a.mape} rmse={a.rmse} rmse2={b.rmse} apes={np.round(apes, 1).tolist()} counts={counts_ok}",
           time.perf_counter() - t0, 60)


# --------------------------------------------------------------------------- 13 determinism


@pytest.mark.slow
def test_criterion_13_determinism(tmp_path):
    t0 = time.perf_counter()
    for name in ("a", "b"):
        reproduce("particles", tmp_path / name, [7])
    files = sorted(p.name for p in (tmp_path / "a" / "metrics").iterdir())
    same = [(tmp_path / "a" / "metrics" / f).read_bytes() == (tmp_path / "b" / "metrics" / f).read_bytes()
            for f in files]
    same.append((tmp_path / "a" / "mape.csv").read_bytes() == (tmp_path / "b" / "mape.csv").read_bytes())
    report(13, "byte-identical reruns", files and all(same), f"{len(files)} metrics CSVs + mape.csv compared",
           time.perf_counter() - t0, 1800)
