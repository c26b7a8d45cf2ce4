import math

import numpy as np
import pytest

from hyperdiff.diffusion import (
    SamplerConfig, cosine_schedule, ddim_step, epsilon_hat, iteration_schedule, q_sample, sample, sigma,
)

N_MC = 100_000


def closed_form_alpha_bar(t, T, s=0.008):
    f = lambda u: math.cos(((u / T + s) / (1 + s)) * math.pi / 2) ** 2  # noqa: E731
    return f(t) / f(0)


def test_first_beta_small():
    sched = cosine_schedule(1000)
    beta1 = 1 - closed_form_alpha_bar(1, 1000)
    assert beta1 < 0.01
    assert sched.betas[1] == pytest.approx(beta1, rel=1e-12)
    assert sched.alpha_bars[1] / sched.alpha_bars[0] > 0.99


@pytest.mark.parametrize("T", [1, 2, 10, 100, 1000, 4000])
def test_schedule_shape(T):
    sched = cosine_schedule(T)
    ab = sched.alpha_bars
    assert np.all(np.diff(ab) < 0)
    assert np.all(sched.betas[1:] <= 0.999)
    assert np.all(sched.betas[1:] > 0)
    assert ab[-1] > 0
    np.testing.assert_allclose(sched.alphas[1:], 1 - sched.betas[1:])


def test_schedule_follows_closed_form_before_clipping():
    sched = cosine_schedule(1000)
    for t in (1, 10, 250, 500, 900):
        assert sched.alpha_bars[t] == pytest.approx(closed_form_alpha_bar(t, 1000), rel=1e-9)


def test_q_sample_edge_cases(rng):
    sched = cosine_schedule(100)
    y0 = rng.standard_normal((2, 17, 3))
    eps = rng.standard_normal((2, 17, 3))
    np.testing.assert_allclose(q_sample(np.zeros_like(y0), 40, eps, sched),
                               math.sqrt(1 - sched.alpha_bars[40]) * eps)
    ones = sched.__class__(T=1, betas=np.zeros(2), alphas=np.ones(2), alpha_bars=np.ones(2))
    np.testing.assert_array_equal(q_sample(y0, 1, eps, ones), y0)
    with pytest.raises(ValueError):
        q_sample(y0, 0, eps, sched)
    with pytest.raises(ValueError):
        q_sample(y0, 101, eps, sched)


def test_q_sample_per_row_timesteps(rng):
    sched = cosine_schedule(100)
    y0, eps = rng.standard_normal((3, 4, 3)), rng.standard_normal((3, 4, 3))
    t = np.array([5, 50, 99])
    out = q_sample(y0, t, eps, sched)
    for i in range(3):
        np.testing.assert_array_equal(out[i], q_sample(y0[i], int(t[i]), eps[i], sched))


def test_q_sample_monte_carlo():
    sched = cosine_schedule(1000)
    t, y0 = 300, 0.7
    ab = sched.alpha_bars[t]
    draws = q_sample(np.full(N_MC, y0), t, np.random.default_rng(0).standard_normal(N_MC), sched)
    var = 1 - ab
    assert abs(draws.mean() - math.sqrt(ab) * y0) < 3 * math.sqrt(var / N_MC)
    assert abs(draws.var() - var) < 3 * var * math.sqrt(2 / N_MC)


def test_epsilon_hat_inverts_q_sample(rng):
    sched = cosine_schedule(1000)
    y0, eps = rng.standard_normal((4, 17, 3)), rng.standard_normal((4, 17, 3))
    for t in (1, 17, 500, 1000):
        y_t = q_sample(y0, t, eps, sched)
        np.testing.assert_allclose(epsilon_hat(y_t, y0, t, sched), eps, rtol=0, atol=1e-9)
        np.testing.assert_array_equal(epsilon_hat(math.sqrt(sched.alpha_bars[t]) * y0, y0, t, sched), 0.0)


def test_sigma_edge_cases():
    sched = cosine_schedule(1000)
    assert sigma(500, 500, sched) == 0.0
    s = sigma(800, 600, sched)
    ab, abn = sched.alpha_bars[800], sched.alpha_bars[600]
    assert s == pytest.approx(math.sqrt((1 - abn) / (1 - ab)) * math.sqrt(1 - ab / abn), rel=1e-14)
    assert s ** 2 <= 1 - abn


def test_ddim_step_deterministic_part(rng):
    sched = cosine_schedule(1000)
    y0_hat = rng.standard_normal((2, 17, 3))
    y_t = math.sqrt(sched.alpha_bars[800]) * y0_hat
    out = ddim_step(y_t, y0_hat, 800, 600, np.zeros_like(y0_hat), sched)
    np.testing.assert_allclose(out, math.sqrt(sched.alpha_bars[600]) * y0_hat, atol=1e-15)


def test_ddim_step_rejects_forward_move(rng):
    sched = cosine_schedule(10)
    z = np.zeros((1, 2, 3))
    with pytest.raises(ValueError):
        ddim_step(z, z, 3, 5, z, sched)


@pytest.mark.parametrize("t,t_next", [(1000, 800), (600, 400), (200, 1)])
def test_ddim_variance_preserved_with_oracle(t, t_next):
    sched = cosine_schedule(1000)
    rng = np.random.default_rng(t)
    y0 = np.full(N_MC, 0.3)
    y_t = q_sample(y0, t, rng.standard_normal(N_MC), sched)
    out = ddim_step(y_t, y0, t, t_next, rng.standard_normal(N_MC), sched)
    resid = out - math.sqrt(sched.alpha_bars[t_next]) * y0
    var = 1 - sched.alpha_bars[t_next]
    assert abs(resid.mean()) < 3 * math.sqrt(var / N_MC)
    assert abs(resid.var() - var) < 3 * var * math.sqrt(2 / N_MC)


def test_printed_radicand_breaks_variance():
    sched = cosine_schedule(1000)
    rng = np.random.default_rng(0)
    y0 = np.zeros(N_MC)
    y_t = q_sample(y0, 600, rng.standard_normal(N_MC), sched)
    out = ddim_step(y_t, y0, 600, 400, rng.standard_normal(N_MC), sched, radicand="printed")
    var = 1 - sched.alpha_bars[400]
    assert abs(out.var() - var) > 10 * var * math.sqrt(2 / N_MC)


def test_iteration_schedule_examples():
    assert [t for t, _ in iteration_schedule(1000, 5)] == [1000, 800, 600, 400, 200]
    assert iteration_schedule(1000, 5)[-1] == (200, 0)
    assert iteration_schedule(1000, 1) == [(1000, 0)]
    assert [t for t, _ in iteration_schedule(10, 10)] == list(range(10, 0, -1))


@pytest.mark.parametrize("T,K", [(1000, 3), (1000, 7), (50, 50), (999, 13)])
def test_iteration_schedule_decreasing(T, K):
    ts = [t for t, _ in iteration_schedule(T, K)]
    assert len(ts) == K and ts[0] == T
    assert all(a > b for a, b in zip(ts, ts[1:]))
    nxt = [tn for _, tn in iteration_schedule(T, K)]
    assert nxt == ts[1:] + [0]


def test_iteration_schedule_errors():
    for T, K in ((10, 0), (10, 11)):
        with pytest.raises(ValueError):
            iteration_schedule(T, K)


class Oracle:
    def __init__(self, y0, h):
        self.target = np.repeat(y0, h, axis=0)
        self.calls = 0
        self.poses = 0

    def __call__(self, y_t, x, t):
        self.calls += 1
        self.poses += len(y_t)
        return self.target


@pytest.mark.parametrize("K", [1, 5, 10])
def test_sample_with_oracle_returns_ground_truth(rng, K):
    sched = cosine_schedule(1000)
    y0 = rng.standard_normal((3, 17, 3))
    oracle = Oracle(y0, 4)
    out = sample(oracle, rng.standard_normal((3, 17, 2)), SamplerConfig(4, K, 0), sched)
    assert out.shape == (3, 4, 17, 3)
    np.testing.assert_array_equal(out, np.repeat(y0[:, None], 4, axis=1))
    assert oracle.calls == K
    assert oracle.poses == 3 * 4 * K


def test_sample_h1_k1_single_pass(rng):
    oracle = Oracle(rng.standard_normal((5, 17, 3)), 1)
    sample(oracle, np.zeros((5, 17, 2)), SamplerConfig(1, 1, 0), cosine_schedule(100))
    assert oracle.poses == 5


def _noisy_denoiser(y_t, x, t):
    return 0.5 * y_t + 0.1 * np.concatenate([x, x[..., :1]], axis=-1)


def test_sample_reproducible_and_seed_sensitive(rng):
    sched = cosine_schedule(1000)
    x = rng.standard_normal((2, 17, 2))
    a = sample(_noisy_denoiser, x, SamplerConfig(3, 5, 42), sched)
    np.testing.assert_array_equal(a, sample(_noisy_denoiser, x, SamplerConfig(3, 5, 42), sched))
    assert not np.array_equal(a, sample(_noisy_denoiser, x, SamplerConfig(3, 5, 43), sched))


def test_hypothesis_streams_independent_of_count(rng):
    # hypothesis h uses stream (seed, h), so adding hypotheses leaves earlier ones unchanged
    sched = cosine_schedule(1000)
    x = rng.standard_normal((2, 17, 2))
    few = sample(_noisy_denoiser, x, SamplerConfig(2, 4, 7), sched)
    many = sample(_noisy_denoiser, x, SamplerConfig(5, 4, 7), sched)
    np.testing.assert_array_equal(few, many[:, :2])
