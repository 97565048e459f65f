import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles

from risnoma import tape as tp
from risnoma.channel import ChannelSet, TopologyConfig, generate_topology, make_rng, sample_channels
from risnoma.errors import InvalidConfig
from risnoma.maml import (TWO_PI, Adam, LearnedStepSize, LossWeights, TrainingConfig, clip_phase,
                          draw_batch, evaluate, infer, infer_batch, inner_loop, make_batch,
                          meta_gradient, outer_step, train, wrap_phase, write_log)
from risnoma.noma import cluster_by_qos
from risnoma.policy import NetworkWeights, init_weights, layer_dims_for

TINY = TopologyConfig(num_elements=4, num_antennas=4, num_users=4)
SMALL_NET = (16, 16)


def tiny_setup(seed=0, B=2, topo=TINY):
    batch = draw_batch(topo, [(seed, b) for b in range(B)])
    w = init_weights(layer_dims_for(topo.num_users, topo.num_antennas, SMALL_NET), (seed, 9))
    theta0 = make_rng(seed, 3).uniform(0, TWO_PI, (B, topo.num_elements))
    return batch, w, theta0


def run_inner(theta0, arrays, g, batch, J, second_order=False, phase_mode="wrap"):
    return inner_loop(theta0, arrays, g, batch, J, tp.Tape(), second_order=second_order,
                      phase_mode=phase_mode)


def close(a, b, rtol):
    return abs(a - b) <= rtol * max(1.0, abs(b))


# -- configuration ---------------------------------------------------------------

def test_loss_weights_signs():
    LossWeights(-1.0, 10.0)
    with pytest.raises(InvalidConfig):
        LossWeights(1.0, 10.0)
    with pytest.raises(InvalidConfig):
        LossWeights(-1.0, 0.0)


@pytest.mark.parametrize("changes", [{"inner_steps": 0}, {"inner_lr": 0.0}, {"outer_lr": -1.0},
                                     {"phase_mode": "fold"}, {"optimizer": "rmsprop"}])
def test_training_config_validation(changes):
    with pytest.raises(InvalidConfig):
        TrainingConfig(**changes)


def test_step_size_round_trip():
    assert LearnedStepSize.from_gamma(0.01).gamma == pytest.approx(0.01, rel=1e-15)


# -- loss ---------------------------------------------------------------------------

def _single(seed, topo=TINY):
    sc = generate_topology(topo, (seed, 1))
    ch = sample_channels(sc, (seed, 2))
    return sc, ch


def test_loss_matches_scripted_evaluation():
    for seed in range(3):
        sc, ch = _single(seed)
        order = cluster_by_qos(sc.qos).order
        batch = make_batch([sc], [ch])
        w = init_weights(layer_dims_for(4, 4, (6,)), seed)
        theta = make_rng(seed, 5).uniform(0, TWO_PI, 4)
        ev = evaluate(theta[None], w.arrays(), batch)

        h = oracles.combined(ch, theta)
        x = oracles.encode(h[order], sc.qos[order], ch.path_loss[order])
        P = oracles.mlp_power(w.arrays(), x, sc.config.p_max)
        rates = oracles.noma_rates(h, order, P, sc.noise_power, sc.config.bandwidth) / 1e6
        expected = oracles.hinge_loss(rates, sc.qos)
        assert float(ev.loss[0]) == pytest.approx(expected, rel=1e-10)


def test_oma_loss_matches_scripted_evaluation():
    sc, ch = _single(4)
    batch = make_batch([sc], [ch], access="oma")
    w = init_weights(layer_dims_for(4, 4, (6,)), 1)
    theta = make_rng(1).uniform(0, TWO_PI, 4)
    ev = evaluate(theta[None], w.arrays(), batch)
    h = oracles.combined(ch, theta)
    P = oracles.mlp_power(w.arrays(), oracles.encode(h, sc.qos, ch.path_loss), sc.config.p_max)
    rates = oracles.oma_rates(h, P, sc.noise_power, sc.config.bandwidth) / 1e6
    assert float(ev.loss[0]) == pytest.approx(oracles.hinge_loss(rates, sc.qos), rel=1e-10)


def make_batch_like(batch, **changes):
    return dataclasses.replace(batch, **changes)


def test_hinge_boundary_and_shortfall():
    sc, ch = _single(7)
    batch = make_batch([sc], [ch])
    w = init_weights(layer_dims_for(4, 4, (6,)), 2)
    w.weights[0][32:36] = 0.0  # powers must not react to the QoS inputs
    theta = np.zeros((1, 4))
    ev = evaluate(theta, w.arrays(), batch)
    R_user = np.empty(4)
    R_user[batch.order[0]] = ev.rates[0]  # Mbit/s, user order

    met = make_batch_like(batch, qos=(R_user * 1e6)[None])
    L = float(evaluate(theta, w.arrays(), met).loss[0])
    assert L == pytest.approx(-R_user.sum(), rel=1e-12)

    short = R_user * 1e6
    short[2] += 0.5e6
    L2 = float(evaluate(theta, w.arrays(), make_batch_like(batch, qos=short[None])).loss[0])
    assert L2 - L == pytest.approx(5.0, rel=1e-6)


# -- phase projection ----------------------------------------------------------

@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_wrap_lands_in_range(x):
    y = wrap_phase(np.array([x]))[0]
    assert 0.0 <= y < TWO_PI
    assert np.isclose(np.cos(y), np.cos(x), atol=1e-6)


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_clip_lands_in_range(x):
    assert 0.0 <= clip_phase(np.array([x]))[0] <= TWO_PI


def test_wrap_edge_values():
    v = wrap_phase(np.array([TWO_PI, -1e-300, 0.0, -TWO_PI]))
    assert np.all((v >= 0) & (v < TWO_PI))


# -- inner loop ---------------------------------------------------------------------

def test_zero_step_keeps_theta():
    batch, w, theta0 = tiny_setup()
    theta, _, res = run_inner(theta0, w.arrays(), -np.inf, batch, 3)
    np.testing.assert_array_equal(theta.value, theta0)
    assert np.all(res.losses == res.losses[0])


def test_zero_steps_rejected():
    batch, w, theta0 = tiny_setup()
    with pytest.raises(InvalidConfig):
        run_inner(theta0, w.arrays(), 0.0, batch, 0)


def _single_loss(theta_row, arrays, batch):
    return float(evaluate(np.asarray(theta_row)[None], arrays, batch).loss[0])


def test_one_step_matches_hand_gradient():
    topo = TopologyConfig(num_elements=1, num_antennas=2, num_users=2)
    batch, w, theta0 = tiny_setup(3, B=1, topo=topo)
    gamma = 0.05
    h = 1e-6
    fd = (_single_loss(theta0[0] + h, w.arrays(), batch)
          - _single_loss(theta0[0] - h, w.arrays(), batch)) / (2 * h)
    expected = np.mod(theta0[0, 0] - gamma * fd, TWO_PI)
    theta, _, _ = run_inner(theta0, w.arrays(), np.log(gamma), batch, 1)
    assert abs(theta.value[0, 0] - expected) <= 1e-7 * max(1.0, abs(gamma * fd))


def test_periodic_start_gives_same_loss():
    batch, w, theta0 = tiny_setup(4)
    shift = TWO_PI * make_rng(4, 8).integers(-3, 4, theta0.shape)
    a = evaluate(theta0, w.arrays(), batch).loss
    b = evaluate(theta0 + shift, w.arrays(), batch).loss
    np.testing.assert_allclose(b, a, rtol=1e-12)
    ra = run_inner(theta0, w.arrays(), np.log(0.02), batch, 3)[2]
    rb = run_inner(theta0 + shift, w.arrays(), np.log(0.02), batch, 3)[2]
    np.testing.assert_allclose(rb.losses, ra.losses, rtol=1e-9)


def test_inner_gradient_matches_fd():
    rng = make_rng(21)
    for seed in range(5):
        batch, w, theta0 = tiny_setup(seed, B=1)
        t = tp.Tape()
        th = t.constant(theta0)
        g = tp.backward(evaluate(th, w.on_tape(t), batch).loss.sum(), [th])[0][0]
        for n in rng.choice(4, 2, replace=False):
            e = np.zeros(4)
            e[n] = 1e-6
            fd = (_single_loss(theta0[0] + e, w.arrays(), batch)
                  - _single_loss(theta0[0] - e, w.arrays(), batch)) / 2e-6
            assert close(g[n], fd, 1e-5)


def test_phases_stay_feasible():
    batch, w, theta0 = tiny_setup(5, B=4)
    for mode in ("wrap", "clip"):
        _, _, res = run_inner(theta0, w.arrays(), np.log(5.0), batch, 4, phase_mode=mode)
        assert res.violations == 0
        assert np.all(res.theta >= 0) and np.all(res.theta <= TWO_PI)


# -- outer update --------------------------------------------------------------------

def _mean_final_loss(arrays, g, batch, theta0, J):
    _, _, res = run_inner(theta0, arrays, g, batch, J)
    return float(res.losses[-1].mean())


def test_meta_gradient_matches_fd_through_unroll():
    cfg = TrainingConfig(inner_steps=2, hidden=SMALL_NET, inner_lr=0.05)
    step = LearnedStepSize.from_gamma(cfg.inner_lr)
    batch, w, theta0 = tiny_setup(8, B=2)
    _, grads, _ = meta_gradient(w, step, batch, theta0, cfg)
    arrays = w.arrays()
    rng = make_rng(8, 1)
    for i in range(len(arrays)):
        idx = tuple(rng.integers(0, s) for s in arrays[i].shape)
        h = 1e-6

        def f(delta):
            shifted = [a.copy() for a in arrays]
            shifted[i][idx] += delta
            return _mean_final_loss(shifted, step.g, batch, theta0, 2)
        fd = (f(h) - f(-h)) / (2 * h)
        assert close(grads[i][idx], fd, 1e-4), (i, idx, grads[i][idx], fd)
    fd_g = (_mean_final_loss(arrays, step.g + 1e-6, batch, theta0, 2)
            - _mean_final_loss(arrays, step.g - 1e-6, batch, theta0, 2)) / 2e-6
    assert close(grads[-1], fd_g, 1e-4)


def test_second_order_changes_update():
    batch, w, theta0 = tiny_setup(9)
    step = LearnedStepSize.from_gamma(0.05)
    on = TrainingConfig(inner_steps=2, hidden=SMALL_NET, second_order=True)
    off = on.replace(second_order=False)
    w_on, _, _ = outer_step(w, step, batch, on, theta0)
    w_off, _, _ = outer_step(w, step, batch, off, theta0)
    diff = max(np.max(np.abs(a - b)) for a, b in zip(w_on.arrays(), w_off.arrays()))
    assert diff > 0


def test_flat_inner_gradient_reduces_to_plain_gradient():
    batch, w, theta0 = tiny_setup(10)
    ch = batch.channels
    flat = make_batch_like(batch, channels=ChannelSet(ch.h_br, ch.h_direct,
                                                       np.zeros_like(ch.h_ris), ch.path_loss))
    cfg = TrainingConfig(inner_steps=3, hidden=SMALL_NET)
    _, grads, _ = meta_gradient(w, LearnedStepSize.from_gamma(0.1), flat, theta0, cfg)
    t = tp.Tape()
    params = w.on_tape(t)
    plain = tp.backward(evaluate(theta0, params, flat).loss.sum() * 0.5, params)
    for a, b in zip(grads[:-1], plain):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    assert grads[-1] == 0


def test_gradient_clipping_caps_norm():
    batch, w, theta0 = tiny_setup(11)
    step = LearnedStepSize.from_gamma(0.05)
    cfg = TrainingConfig(inner_steps=1, hidden=SMALL_NET, grad_clip=1e-3)
    _, _, info = outer_step(w, step, batch, cfg, theta0)
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in info["grads"]))
    assert norm == pytest.approx(1e-3, rel=1e-9)


def test_adam_option_moves_weights():
    batch, w, theta0 = tiny_setup(12)
    cfg = TrainingConfig(inner_steps=1, hidden=SMALL_NET, optimizer="adam")
    w2, _, _ = outer_step(w, LearnedStepSize.from_gamma(0.05), batch, cfg, theta0,
                          optimizer=Adam(1e-3))
    # first Adam step moves every weight with a nonzero gradient by about lr
    delta = np.abs(w2.weights[-1] - w.weights[-1])
    assert np.max(delta) == pytest.approx(1e-3, rel=1e-3)


# -- training ------------------------------------------------------------------------

def test_zero_episodes_returns_initial_weights():
    cfg = TrainingConfig(episodes=0, hidden=SMALL_NET)
    init = init_weights(layer_dims_for(4, 4, SMALL_NET), 1)
    w, step, rows = train(cfg, TINY, init=init)
    assert rows == []
    for a, b in zip(w.arrays(), init.arrays()):
        np.testing.assert_array_equal(a, b)
    assert step.gamma == pytest.approx(cfg.inner_lr)


def test_training_is_deterministic(tmp_path):
    cfg = TrainingConfig(episodes=4, batch_size=2, hidden=SMALL_NET, seed=3)
    runs = []
    for name in ("a.csv", "b.csv"):
        w, step, rows = train(cfg, TINY)
        write_log(rows, tmp_path / name)
        runs.append((w, step))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == \
        "episode,mean_loss,mean_sum_rate_mbps,gamma_theta,skipped_episodes"
    for a, b in zip(runs[0][0].arrays(), runs[1][0].arrays()):
        np.testing.assert_array_equal(a, b)


def test_fixed_scenario_training_makes_progress():
    batch = draw_batch(TINY, [(42, 0)])
    cfg = TrainingConfig(episodes=200, batch_size=1, hidden=SMALL_NET, seed=1)
    _, _, rows = train(cfg, TINY, batches=batch)
    losses = np.array([r.mean_loss for r in rows])
    assert losses[-20:].mean() < losses[:20].mean()
    assert all(r.violations == 0 for r in rows)


def test_infer_with_zero_network_is_feasible():
    sc, ch = _single(13)
    dims = layer_dims_for(4, 4, SMALL_NET)
    zero = NetworkWeights.from_arrays(dims, [np.zeros_like(a) for a in init_weights(dims, 0).arrays()])
    theta, P, rep = infer(zero, LearnedStepSize.from_gamma(0.01), sc, ch)
    assert np.all(P > 0) and P.sum() < sc.config.p_max
    assert np.all((theta >= 0) & (theta < TWO_PI))
    assert rep.rate.shape == (4,)


def test_infer_default_runs_five_steps():
    batch, w, theta0 = tiny_setup(14, B=1)
    res = infer_batch(w, LearnedStepSize.from_gamma(0.01), batch, 5, theta0)
    assert res.losses.shape == (6, 1)


def test_infer_report_matches_batch_result():
    sc, ch = _single(15)
    w = init_weights(layer_dims_for(4, 4, SMALL_NET), 2)
    theta0 = make_rng(15).uniform(0, TWO_PI, 4)
    theta, P, rep = infer(w, LearnedStepSize.from_gamma(0.02), sc, ch, theta0=theta0)
    res = infer_batch(w, LearnedStepSize.from_gamma(0.02), make_batch([sc], [ch]), 5, theta0[None])
    assert rep.sum_rate / 1e6 == pytest.approx(res.sum_rates[-1, 0], rel=1e-10)
