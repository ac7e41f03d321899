import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flamegrad.params import sigmoid, softplus_inverse
from flamegrad.sampler import (
    GeneratorOrder,
    chain_starts,
    chaos_game_backward,
    draw_generator_order,
    quality_bound,
    restart_point,
    run_chaos_game,
)

from conftest import SIERPINSKI, central_difference, make_flame


def fixed_order(rows, n):
    return GeneratorOrder(np.array(rows, dtype=np.int64), seed=0, n_generators=n)


def direct_qualities(steps, n, beta):
    """q_t = sum_k beta^-(t-k) e_{g_k}, summed from the chain start."""
    T = len(steps)
    out = np.zeros((T, n))
    for t in range(T):
        for k in range(t + 1):
            out[t, steps[k]] += beta ** -(t - k)
    return out


def test_order_deterministic_and_in_range():
    a = draw_generator_order(5, 3, 8, 16)
    b = draw_generator_order(5, 3, 8, 16)
    assert np.array_equal(a.indices, b.indices)
    assert a.shape == (8, 16)
    assert not np.array_equal(a.indices, draw_generator_order(6, 3, 8, 16).indices)
    two = draw_generator_order(1, 2, 50, 50).indices
    assert set(np.unique(two)) == {0, 1}


def test_order_frequencies():
    idx = draw_generator_order(0, 4, 1000, 1000).indices
    freq = np.bincount(idx.ravel(), minlength=4) / idx.size
    assert np.all(np.abs(freq - 0.25) < 0.01 * 0.25)


def test_order_rejects_single_generator():
    with pytest.raises(ValueError):
        draw_generator_order(0, 1, 4, 4)


def test_chain_starts_uniform_square():
    start, warm = chain_starts(3, 20000, 7, 5)
    assert start.shape == (20000, 2) and warm.shape == (20000, 7)
    assert np.all(np.abs(start) <= 1)
    assert abs(start.mean()) < 0.02
    assert np.all((warm >= 0) & (warm < 5))


def test_restart_points_deterministic_in_square():
    pts = np.array([restart_point(9, b, t) for b in range(50) for t in range(50)])
    assert np.all(np.abs(pts) <= 1)
    assert restart_point(9, 3, 4) == restart_point(9, 3, 4)
    assert restart_point(9, 3, 4) != restart_point(9, 4, 3)
    assert abs(pts.mean()) < 0.05


def test_quality_example_three_steps():
    flame = make_flame(SIERPINSKI[:2], beta_raw=softplus_inverse(1.0))
    batch = run_chaos_game(flame, fixed_order([[0, 1, 0]], 2), warmup=0)
    np.testing.assert_allclose(batch.qualities[0, 2], [1.25, 0.5], rtol=0, atol=1e-15)


def test_all_zero_order_never_adds_second_generator():
    flame = make_flame(SIERPINSKI[:2])
    batch = run_chaos_game(flame, fixed_order([[0] * 30] * 3, 2), warmup=0)
    assert np.all(batch.qualities[..., 1] == 0)


@pytest.mark.parametrize("beta", [1.1, 1.5, 3.0])
def test_recurrence_equals_direct_sum(beta):
    flame = make_flame(SIERPINSKI, beta_raw=softplus_inverse(beta - 1))
    order = draw_generator_order(int(beta * 10), 3, 16, 100)
    batch = run_chaos_game(flame, order, warmup=20, init_seed=4)
    assert batch.dead_count == 0
    for b in range(16):
        ref = direct_qualities(batch.steps[b], 3, beta)[20:]
        assert np.abs(batch.qualities[b] - ref).max() < 1e-9


def test_warmup_samples_are_discarded():
    flame = make_flame(SIERPINSKI)
    order = draw_generator_order(0, 3, 4, 10)
    batch = run_chaos_game(flame, order, warmup=6, init_seed=2)
    assert batch.positions.shape == (4, 10, 2)
    assert np.array_equal(batch.steps[:, 6:], order.indices)
    # replay the chain by hand
    coefs = flame.affine_array()
    for b in range(4):
        x, y = batch.start[b]
        for t, g in enumerate(batch.steps[b]):
            a, bb, c, d, e, f = coefs[g]
            x, y = a * x + bb * y + c, d * x + e * y + f
            np.testing.assert_allclose(batch.trajectory[b, t], [x, y], atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 1000))
def test_quality_bounded_and_positive(beta_raw, seed):
    flame = make_flame(SIERPINSKI, beta_raw=beta_raw)
    batch = run_chaos_game(flame, draw_generator_order(seed, 3, 8, 40), warmup=5, init_seed=seed)
    q = batch.qualities
    assert np.all(q >= 0)
    assert np.all(q.sum(-1)[batch.alive] > 0)
    assert q.max() <= quality_bound(batch.beta) * (1 + 1e-12)
    assert np.all(np.isfinite(batch.positions[batch.alive]))


def test_bounding_box_stabilizes():
    flame = make_flame(SIERPINSKI)
    batch = run_chaos_game(flame, draw_generator_order(1, 3, 4000, 50), warmup=20, init_seed=1)
    pos = batch.positions

    def box(p):
        p = p.reshape(-1, 2)
        return p.min(0), p.max(0)

    (lo1, hi1), (lo2, hi2) = box(pos[:2000]), box(pos[2000:])
    inter = np.prod(np.clip(np.minimum(hi1, hi2) - np.maximum(lo1, lo2), 0, None))
    union = np.prod(hi1 - lo1) + np.prod(hi2 - lo2) - inter
    assert inter / union >= 0.9


def test_divergence_restarts(caplog):
    flame = make_flame([(3.0, 0, 0, 0, 3.0, 0), (3.0, 0, 0.5, 0, -3.0, 0)])
    with caplog.at_level(logging.WARNING):
        batch = run_chaos_game(flame, draw_generator_order(0, 2, 32, 60), warmup=5, init_seed=0)
    assert batch.dead_count > 0
    assert batch.dead_count == int((~batch.alive).sum())
    assert np.all(np.isfinite(batch.trajectory))
    assert np.all(np.abs(batch.trajectory) <= 1e6)
    assert np.all(batch.qualities[~batch.alive] == 0)
    assert np.all(batch.qualities.sum(-1)[batch.alive] > 0)
    assert 0 < batch.dead_fraction < 1


def test_dead_majority_warns(caplog):
    flame = make_flame([(1e7, 0, 0, 0, 1e7, 0), (1e7, 0, 1, 0, 1e7, 0)])
    with caplog.at_level(logging.WARNING):
        batch = run_chaos_game(flame, draw_generator_order(0, 2, 8, 20), warmup=0)
    assert batch.dead_fraction > 0.5
    assert "diverged" in caplog.text


def test_generator_count_mismatch():
    with pytest.raises(ValueError):
        run_chaos_game(make_flame(SIERPINSKI), draw_generator_order(0, 2, 2, 2))


def test_zero_adjoint_gives_zero_gradient():
    flame = make_flame(SIERPINSKI)
    batch = run_chaos_game(flame, draw_generator_order(0, 3, 8, 10), warmup=3)
    g = chaos_game_backward(batch, flame, np.zeros_like(batch.positions), np.zeros_like(batch.qualities))
    assert not np.any(g.affine) and g.beta_raw == 0.0


def test_beta_gradient_three_step_chain():
    beta = 2.0
    raw = softplus_inverse(beta - 1)
    flame = make_flame(SIERPINSKI[:2], beta_raw=raw)
    batch = run_chaos_game(flame, fixed_order([[0, 1, 0]], 2), warmup=0)
    adj_q = np.zeros_like(batch.qualities)
    adj_q[0, 2] = [1.0, 0.0]
    g = chaos_game_backward(batch, flame, np.zeros_like(batch.positions), adj_q)
    # q_2[0] = beta^-2 + 1  =>  d/d(beta) = -2 beta^-3
    assert g.beta_raw == pytest.approx(-2 * beta**-3 * sigmoid(raw), rel=1e-14)
    adj_q[0, 2] = [0.0, 1.0]
    g = chaos_game_backward(batch, flame, np.zeros_like(batch.positions), adj_q)
    # q_2[1] = beta^-1
    assert g.beta_raw == pytest.approx(-beta**-2 * sigmoid(raw), rel=1e-14)


def _objective(flame, order, warmup, wp, wq):
    batch = run_chaos_game(flame, order, warmup=warmup, init_seed=3)
    return float((wp * batch.positions).sum() + (wq * batch.qualities).sum())


@pytest.mark.parametrize("warmup", [0, 5])
def test_backward_matches_finite_differences(warmup):
    rng = np.random.default_rng(warmup)
    affines = [tuple(0.5 * np.eye(2).ravel()[[0, 1]]) + (rng.uniform(-.5, .5),) +
               tuple(0.5 * np.eye(2).ravel()[[2, 3]]) + (rng.uniform(-.5, .5),) for _ in range(3)]
    affines = [tuple(np.array(a) + np.r_[rng.uniform(-.2, .2, 2), 0, rng.uniform(-.2, .2, 2), 0]) for a in affines]
    flame = make_flame(affines, beta_raw=0.3)
    order = draw_generator_order(7, 3, 4, 10)
    wp = rng.normal(size=(4, 10, 2))
    wq = rng.normal(size=(4, 10, 3))
    batch = run_chaos_game(flame, order, warmup=warmup, init_seed=3)
    g = chaos_game_backward(batch, flame, wp, wq, deterministic=True)

    def f(vec):
        fl = make_flame([tuple(r) for r in vec[:18].reshape(3, 6)], beta_raw=vec[18])
        return _objective(fl, order, warmup, wp, wq)

    vec = np.r_[flame.affine_array().ravel(), flame.beta_raw]
    num = central_difference(f, vec, h=1e-6)
    ana = np.r_[g.affine.ravel(), g.beta_raw]
    mask = np.abs(ana) > 1e-6
    rel = np.abs(ana - num)[mask] / np.maximum(np.abs(ana), np.abs(num))[mask]
    assert rel.max() < 1e-6


def test_backward_deterministic():
    flame = make_flame(SIERPINSKI)
    batch = run_chaos_game(flame, draw_generator_order(0, 3, 64, 30), warmup=5)
    rng = np.random.default_rng(0)
    wp = rng.normal(size=batch.positions.shape)
    wq = rng.normal(size=batch.qualities.shape)
    g1 = chaos_game_backward(batch, flame, wp, wq, deterministic=True)
    g2 = chaos_game_backward(batch, flame, wp, wq, deterministic=True)
    assert np.array_equal(g1.affine, g2.affine) and g1.beta_raw == g2.beta_raw
    g3 = chaos_game_backward(batch, flame, wp, wq, deterministic=False)
    np.testing.assert_allclose(g3.affine, g1.affine, rtol=1e-10, atol=1e-12)


def test_restart_cuts_adjoint():
    # generator 1 always diverges, so every chain restarts at each use of it
    flame = make_flame([(0.5, 0, 0, 0, 0.5, 0), (1e7, 0, 0, 0, 1e7, 1e7)])
    order = fixed_order([[0, 0, 1, 0, 0]], 2)
    batch = run_chaos_game(flame, order, warmup=0)
    assert list(batch.alive[0]) == [True, True, False, True, True]
    adj = np.zeros_like(batch.positions)
    adj[0, 4] = [1.0, 0.0]
    g = chaos_game_backward(batch, flame, adj, np.zeros_like(batch.qualities))
    # only steps 3 and 4 see the adjoint: d x4 / d a0 = x3 + 0.5 * x2(restart point)
    x2 = batch.trajectory[0, 2, 0]
    x3 = batch.trajectory[0, 3, 0]
    assert g.affine[0, 0] == pytest.approx(x3 + 0.5 * x2, rel=1e-12)
    assert not np.any(g.affine[1])


def test_quality_bound():
    assert quality_bound(2.0) == 2.0
    assert quality_bound(1.0) == np.inf
