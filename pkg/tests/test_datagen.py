import math

import numpy as np
import pytest
from scipy import stats

from neuralgde.datagen import (
    CollisionError,
    ParticleParams,
    ReactionNetwork,
    TrafficParams,
    attach_time_features,
    bernoulli_mask,
    bernoulli_undersample,
    first_peak_time,
    initial_particle_state,
    mean_field,
    minmax_normalize,
    pair_forces,
    particle_energy,
    read_stream,
    repressilator_graph,
    repressilator_network,
    simulate_multi_particle,
    synth_traffic,
    tau_leap,
    tau_leap_repressilator,
    two_block_sbm,
    write_stream,
)
from neuralgde.graph import DynamicGraphStream, Graph
from neuralgde.numerics import RngStream


@pytest.fixture(scope="module")
def rollout():
    return simulate_multi_particle(ParticleParams(), rng=RngStream(0, 1))


# --------------------------------------------------------------------------- particles


def test_single_particle_period_return():
    N = 6283
    dt = 2 * math.pi / N
    Z0 = np.array([[1.0, 0.5, 0.0, 0.0]])
    r = simulate_multi_particle(ParticleParams(n=1), T=2 * math.pi, dt=dt, Z_init=Z0)
    assert len(r) == N + 1
    assert abs(np.linalg.norm(r.states[-1, 0, :2]) - np.linalg.norm(Z0[0, :2])) < 1e-5
    energy = 0.5 * np.sum(r.states[:, 0] ** 2, axis=-1)
    assert np.max(np.abs(energy - energy[0])) < 1e-6


def test_pair_forces_exactly_antisymmetric(rollout):
    p = rollout.params
    for k in range(0, len(rollout), 97):
        F = pair_forces(rollout.states[k], rollout.adjacency[k], p)
        np.testing.assert_array_equal(F, -np.swapaxes(F, 0, 1))


def test_reference_rollout_shape_and_symmetry(rollout):
    assert len(rollout) == 2565
    assert rollout.states.shape == (2565, 10, 4)
    for A in rollout.adjacency:
        np.testing.assert_array_equal(A, A.T)
        assert np.all(np.diag(A) == 0)


def test_adjacency_follows_radius_rule(rollout):
    for k in (0, 1000, 2564):
        pos = rollout.states[k, :, :2]
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        expect = (2 * d <= rollout.params.r) & ~np.eye(10, dtype=bool)
        np.testing.assert_array_equal(rollout.adjacency[k] > 0, expect)


def test_energy_non_increasing_between_topology_changes(rollout):
    p = rollout.params
    # each step holds A_k fixed, so compare energies under that same graph
    for k in range(len(rollout) - 1):
        A = rollout.adjacency[k]
        assert particle_energy(rollout.states[k + 1], A, p) <= particle_energy(rollout.states[k], A, p) + 1e-6


def test_energy_conserved_without_drag_or_contact():
    p = ParticleParams(n=2, beta=0.0)
    N = 6283
    # opposite points of one circular orbit stay 2 apart, so 2|x_i - x_j| = 4 > r throughout
    Z0 = np.array([[1.0, 0.0, 0.0, 1.0], [-1.0, 0.0, 0.0, -1.0]])
    r = simulate_multi_particle(p, T=2 * math.pi, dt=2 * math.pi / N, Z_init=Z0)
    assert not r.adjacency.any()
    e = [particle_energy(s, a, p) for s, a in zip(r.states, r.adjacency)]
    assert np.max(np.abs(np.array(e) - e[0])) < 1e-6


def test_initial_state_separated_and_at_rest():
    Z = initial_particle_state(ParticleParams(n=30), RngStream(3))
    d = np.linalg.norm(Z[:, None, :2] - Z[None, :, :2], axis=-1) + np.eye(30)
    assert d.min() >= 1e-3
    assert np.all(np.abs(Z[:, :2]) <= 2.0)
    np.testing.assert_array_equal(Z[:, 2:], 0.0)


def test_collision_is_an_error():
    Z0 = np.array([[0.1, 0.1, 0, 0], [0.1, 0.1, 0, 0]], dtype=float)
    with pytest.raises(CollisionError):
        simulate_multi_particle(ParticleParams(n=2), T=0.1, dt=0.01, Z_init=Z0)


def test_particle_params_validation():
    for bad in (dict(n=0), dict(alpha=0.0), dict(r=-1.0), dict(beta=-0.1)):
        with pytest.raises(ValueError):
            ParticleParams(**bad)


def test_rollout_deterministic():
    a = simulate_multi_particle(ParticleParams(n=4), T=0.5, rng=RngStream(9))
    b = simulate_multi_particle(ParticleParams(n=4), T=0.5, rng=RngStream(9))
    np.testing.assert_array_equal(a.states, b.states)


# --------------------------------------------------------------------------- tau-leaping


def test_no_events_keeps_initial_state():
    net = ReactionNetwork(("a", "b"), (("r", (1, -1), lambda x: 0.0 * x[..., 0]),), (3, 7))
    _, c = tau_leap(net, T=10.0, tau=0.5, rng=RngStream(0), n_runs=3)
    assert np.all(c == np.array([3, 7]))


def test_repressilator_initial_condition_and_grid():
    ts, c = tau_leap_repressilator(rng=RngStream(1), n_runs=5)
    assert len(ts) == 601 and ts[-1] == 300.0
    assert np.all(c[:, 0] == [0, 0, 0, 0, 20, 0])


def test_counts_nonnegative_integers():
    _, c = tau_leap_repressilator(rng=RngStream(2), n_runs=20)
    assert c.dtype.kind == "i"
    assert c.min() >= 0


def test_clamping_at_zero():
    # decay that would overshoot below zero in a single leap
    net = ReactionNetwork(("a",), (("decay", (-1,), lambda x: 50.0 * x[..., 0]),), (5,))
    _, c = tau_leap(net, T=5.0, tau=1.0, rng=RngStream(3), n_runs=10)
    assert c.min() == 0


def test_ensemble_mean_peak_tracks_mean_field():
    ts, c = tau_leap_repressilator(rng=RngStream(4), n_runs=200)
    tm, xm = mean_field(repressilator_network(), 300.0)
    ref = first_peak_time(tm, xm[:, 0])
    assert abs(first_peak_time(ts, c[..., 0].mean(axis=0)) - ref) < 0.1 * ref


def test_tau_leap_validation():
    with pytest.raises(ValueError):
        tau_leap(repressilator_network(), tau=0.0)
    with pytest.raises(ValueError):
        tau_leap(repressilator_network(initial=(0, 0, 0, 0, -1, 0)))


def test_first_peak_time_on_known_curve():
    t = np.linspace(0, 20, 401)
    x = np.exp(-((t - 7.3) ** 2)) + 0.5 * np.exp(-((t - 15) ** 2))
    assert abs(first_peak_time(t, x, window=2.0) - 7.3) < 1e-2


def test_repressilator_graph_is_bipartite():
    g = repressilator_graph()
    assert g.n == 18
    species, reactions = range(6), range(6, 18)
    assert not g.adjacency[np.ix_(species, species)].any()
    assert not g.adjacency[np.ix_(reactions, reactions)].any()
    assert all(len(g.neighbors(s)) == 3 for s in species)


def test_minmax_normalize():
    x = np.array([[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]])
    y, lo, hi = minmax_normalize(x, axis=0)
    np.testing.assert_array_equal(y[:, 0], [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(y[:, 1], 0.0)
    z, _, _ = minmax_normalize(np.array([[4.0, 5.0]]), lo, hi)
    np.testing.assert_array_equal(z, [[1.5, 0.0]])


# --------------------------------------------------------------------------- undersampling


def regular_stream(K=20, n=3):
    rng = RngStream(5)
    feats = [rng.normal(size=(n, 1)) for _ in range(K)]
    return DynamicGraphStream.constant_graph(np.arange(K, dtype=float), feats, Graph.empty(n))


def test_keep_all_is_identity():
    s = regular_stream()
    out = bernoulli_undersample(s, 1.0, RngStream(0))
    np.testing.assert_array_equal(out.timestamps, s.timestamps)
    for a, b in zip(out.features, s.features):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("p", [0.3, 0.5, 0.7])
def test_kept_fraction_binomial(p):
    n = 10_000
    kept = bernoulli_mask(n, p, RngStream(6)).sum()
    assert abs(kept / n - p) < 3 * math.sqrt(p * (1 - p) / n) + 1.0 / n


def test_first_point_always_kept():
    for seed in range(20):
        assert bernoulli_mask(5, 0.05, RngStream(seed))[0]


def test_deltas_geometric_goodness_of_fit():
    p = 0.5
    series = bernoulli_undersample(np.zeros(20_001), p, RngStream(7))
    d = np.diff(series.indices)[:10_000]
    ks = np.arange(1, 9)
    observed = np.array([np.sum(d == k) for k in ks] + [np.sum(d >= 9)])
    probs = np.append(stats.geom.pmf(ks, p), stats.geom.sf(8, p))
    assert stats.chisquare(observed, probs * len(d)).pvalue > 0.01


def test_undersampling_composes_multiplicatively():
    n = 20_000
    first = bernoulli_undersample(np.arange(n), 0.6, RngStream(8))
    second = bernoulli_undersample(first.values, 0.5, RngStream(9))
    frac = len(second.values) / n
    assert abs(frac - 0.3) < 3 * math.sqrt(0.3 * 0.7 / n) + 2.0 / n


def test_irregular_series_on_grid():
    s = bernoulli_undersample(np.arange(100.0), 0.4, RngStream(10), base_dt=0.25)
    np.testing.assert_array_equal(s.timestamps, 0.25 * s.indices)
    np.testing.assert_array_equal(s.values, s.indices.astype(float))


def test_time_features_appended():
    s = regular_stream()
    out = bernoulli_undersample(s, 0.5, RngStream(11), time_features=True, period=7.0)
    assert out.nx == 3
    dts = [x[0, 1] for x in out.features]
    np.testing.assert_array_equal(dts, np.concatenate([[0.0], np.diff(out.timestamps)]))
    np.testing.assert_allclose([x[0, 2] for x in out.features], np.sin(2 * np.pi * out.timestamps / 7.0))
    feats = attach_time_features([0.0, 2.0], [np.zeros((2, 1))] * 2, 4.0)
    np.testing.assert_allclose(feats[1], [[0.0, 2.0, 0.0], [0.0, 2.0, 0.0]], atol=1e-15)


def test_keep_prob_validation():
    for p in (0.0, 1.5):
        with pytest.raises(ValueError):
            bernoulli_mask(10, p, RngStream(0))


# --------------------------------------------------------------------------- traffic


def test_noise_free_traffic_is_sinusoidal():
    quiet = TrafficParams(coupling=0.0, noise=0.0, measurement_noise=0.0)
    stream, pos = synth_traffic(6, 3.0, 1.0 / 48, RngStream(12), quiet)
    t = stream.timestamps
    phase = quiet.phase_gradient * pos.sum(axis=1)
    expect = quiet.mean_speed + quiet.amplitude * np.sin(2 * np.pi * t[:, None] + phase)
    np.testing.assert_allclose(stream.feature_array()[..., 0], expect, atol=1e-12)
    day = 48
    np.testing.assert_allclose(stream.feature_array()[day:, :, 0], stream.feature_array()[:-day, :, 0], atol=1e-9)


def test_traffic_graph_density():
    n = 16
    stream, _ = synth_traffic(n, 1.0, 0.1, RngStream(13))
    pairs = n * (n - 1) // 2
    edges = len(stream.graphs[0].edges())
    assert edges == math.ceil(0.4 * pairs) - 1
    assert abs(edges - math.floor(0.4 * pairs)) <= 1


def test_traffic_deterministic():
    a, _ = synth_traffic(5, 1.0, 0.1, RngStream(14))
    b, _ = synth_traffic(5, 1.0, 0.1, RngStream(14))
    np.testing.assert_array_equal(a.feature_array(), b.feature_array())
    with pytest.raises(ValueError):
        synth_traffic(1, 1.0, 0.1, RngStream(0))


# --------------------------------------------------------------------------- communities and IO


def test_two_block_sbm():
    d = two_block_sbm(20, RngStream(15))
    assert d.graph.n == 40 and d.graph.is_symmetric()
    np.testing.assert_array_equal(d.labels, np.repeat([0, 1], 20))
    assert not (d.train_mask & d.test_mask).any() and (d.train_mask | d.test_mask).all()
    assert d.train_mask.sum() == 8


def test_stream_csv_round_trip(tmp_path):
    s = simulate_multi_particle(ParticleParams(n=4), T=0.2, dt=0.01, rng=RngStream(16)).stream()
    write_stream(tmp_path / "ds", s, ["x", "y", "vx", "vy"], manifest={"seed": 16})
    back = read_stream(tmp_path / "ds")
    np.testing.assert_array_equal(back.timestamps, s.timestamps)
    np.testing.assert_array_equal(back.feature_array(), s.feature_array())
    np.testing.assert_array_equal(back.adjacency_array(), s.adjacency_array())
    header = (tmp_path / "ds" / "data.csv").read_text().splitlines()[0]
    assert header == "t,node,x,y,vx,vy"
