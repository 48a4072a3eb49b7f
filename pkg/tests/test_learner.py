"""Gaussian belief updates checked against the information-form and batch posteriors."""

import numpy as np
import pytest

from ecpricing.learner import (
    NoiseModel,
    PriorConfig,
    ShiftDetector,
    SingularUpdateError,
    WeightBelief,
    batch_posterior,
    detect_shift,
    init_prior,
    reset_prior,
    rms_distance,
    sample_weights,
    update_posterior,
)

ATOL = 1e-8


def information_form(prior, Ps, ys, sigma):
    """Posterior via precisions: Lambda = Sigma0^-1 + P'P / s^2, eta = Sigma0^-1 m0 + P'y / s^2."""
    P, y = np.vstack(Ps), np.concatenate(ys)
    prec0 = np.linalg.inv(prior.covariance)
    prec = prec0 + P.T @ P / sigma**2
    cov = np.linalg.inv(prec)
    return cov @ (prec0 @ prior.mean + P.T @ y / sigma**2), cov


def scenario(seed, K=10, T=24, days=5):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 1, K)
    sigma = rng.uniform(0.01, 0.2)
    Ps = [rng.normal(0, 1, (T, K)) * rng.uniform(0.1, 3, K) for _ in range(days)]
    ys = [P @ theta + rng.normal(0, sigma, T) for P in Ps]
    return theta, sigma, Ps, ys


@pytest.mark.parametrize("seed", range(50))
def test_recursive_equals_batch_and_information_form(seed):
    theta, sigma, Ps, ys = scenario(seed)
    prior = init_prior(10, PriorConfig(pv_indices=(3,)))
    noise = NoiseModel(sigma)
    belief = prior
    for P, y in zip(Ps, ys):
        belief = update_posterior(belief, P, y, noise)
        assert np.linalg.eigvalsh(belief.covariance).min() >= -1e-12
    batch = batch_posterior(prior, Ps, ys, noise)
    np.testing.assert_allclose(belief.mean, batch.mean, atol=ATOL)
    np.testing.assert_allclose(belief.covariance, batch.covariance, atol=ATOL)
    m, C = information_form(prior, Ps, ys, sigma)
    np.testing.assert_allclose(belief.mean, m, atol=1e-7)
    np.testing.assert_allclose(belief.covariance, C, atol=1e-9)


def test_posterior_concentrates_on_truth():
    theta, sigma, Ps, ys = scenario(7, days=40)
    belief = init_prior(10)
    for P, y in zip(Ps, ys):
        belief = update_posterior(belief, P, y, NoiseModel(sigma))
    np.testing.assert_allclose(belief.mean, theta, atol=0.02)
    assert belief.std.max() < 0.01


def test_zero_profiles_leave_belief_unchanged():
    prior = init_prior(3)
    for sigma in (0.0, 0.1):
        post = update_posterior(prior, np.zeros((4, 3)), np.ones(4), NoiseModel(sigma))
        np.testing.assert_allclose(post.mean, prior.mean)
        np.testing.assert_allclose(post.covariance, prior.covariance)


def test_noise_free_rank_deficient_update_is_rejected():
    P = np.zeros((4, 2))
    P[0, 0] = 1.0
    with pytest.raises(SingularUpdateError):
        update_posterior(init_prior(2), P, np.ones(4), NoiseModel(0.0))


def test_shape_checks():
    with pytest.raises(ValueError):
        update_posterior(init_prior(3), np.ones((4, 2)), np.ones(4), NoiseModel(0.1))
    with pytest.raises(ValueError):
        WeightBelief(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        WeightBelief(np.zeros(2), -np.eye(2))
    with pytest.raises(ValueError):
        NoiseModel(-1.0)
    with pytest.raises(ValueError):
        PriorConfig(std=0.0)


def test_prior_uses_std_not_variance():
    b = init_prior(4, PriorConfig(mean=0.5, std=0.15, pv_scale=3.0, pv_indices=(1,)))
    np.testing.assert_allclose(b.mean, [0.5, 1.5, 0.5, 0.5])
    np.testing.assert_allclose(np.diag(b.covariance), [0.0225, 0.2025, 0.0225, 0.0225])
    np.testing.assert_allclose(reset_prior(WeightBelief(np.zeros(4), np.eye(4)), PriorConfig(pv_indices=(1,))).mean,
                               b.mean)


def test_sampling_moments():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    belief = WeightBelief(np.array([0.2, -1.0, 3.0]), A @ A.T + 0.1 * np.eye(3))
    gen = np.random.default_rng(1)
    draws = np.array([sample_weights(belief, gen) for _ in range(40000)])
    np.testing.assert_allclose(draws.mean(axis=0), belief.mean, atol=0.05)
    np.testing.assert_allclose(np.cov(draws.T), belief.covariance, atol=0.1)


def test_sampling_degenerate_covariances():
    b = WeightBelief(np.array([1.0, 2.0]), np.zeros((2, 2)))
    np.testing.assert_allclose(sample_weights(b, 3), [1.0, 2.0])
    v = np.array([1.0, 1.0]) / np.sqrt(2)
    singular = WeightBelief(np.zeros(2), np.outer(v, v))
    for s in range(20):
        d = sample_weights(singular, s)
        assert abs(d[0] - d[1]) < 1e-9  # draws stay on the span of v
    np.testing.assert_array_equal(sample_weights(singular, 5), sample_weights(singular, 5))


def test_rms_and_batch_shift_detection():
    assert rms_distance([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    with pytest.raises(ValueError):
        rms_distance([0], [0, 1])
    hist_p, hist_o = np.zeros((4, 3)), np.zeros((4, 3))
    hist_o[-3:] += 1.0
    assert detect_shift(hist_p, hist_o, 0.5)
    assert not detect_shift(hist_p, hist_o, 1.5)
    assert not detect_shift(hist_p[-2:], hist_o[-2:], 0.5)


def test_streaming_detector_arms_before_firing():
    det = ShiftDetector(tolerance=0.5, window=3)
    far, near = np.ones(4), np.zeros(4)
    # early learning errors never trigger a reset
    assert not any(det.observe(near, far) for _ in range(5))
    assert not any(det.observe(near, near) for _ in range(3))
    assert det.armed
    fired = [det.observe(near, far) for _ in range(3)]
    assert fired == [False, False, True]
    assert not det.armed  # must re-arm after the reset
    assert not any(det.observe(near, far) for _ in range(4))


def test_default_prior_sampling_quantiles():
    belief = init_prior(1)
    gen = np.random.default_rng(2)
    draws = np.array([sample_weights(belief, gen)[0] for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 0.01 and abs(draws.std() - 0.15) < 0.01
    pv = init_prior(1, PriorConfig(pv_indices=(0,)))
    draws = np.array([sample_weights(pv, gen)[0] for _ in range(20_000)])
    np.testing.assert_allclose(np.quantile(draws, [0.1587, 0.5, 0.8413]), [1.05, 1.5, 1.95], atol=0.02)
    assert init_prior(0).size == 0 and sample_weights(init_prior(0), 0).shape == (0,)


def test_exact_observation_identifies_weights():
    rng = np.random.default_rng(3)
    P = rng.normal(size=(4, 4))
    theta = rng.uniform(0, 1, 4)
    post = update_posterior(init_prior(4), P, P @ theta, NoiseModel(1e-9))
    np.testing.assert_allclose(post.mean, np.linalg.solve(P, P @ theta), atol=1e-6)
    assert np.abs(post.covariance).max() < 1e-12


def test_reset_then_update_is_a_fresh_learner():
    theta, sigma, Ps, ys = scenario(12)
    noise = NoiseModel(sigma)
    old = init_prior(10)
    for P, y in zip(Ps[:3], ys[:3]):
        old = update_posterior(old, P, y, noise)
    a = reset_prior(old)
    b = init_prior(10)
    for P, y in zip(Ps[3:], ys[3:]):
        a, b = update_posterior(a, P, y, noise), update_posterior(b, P, y, noise)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.covariance, b.covariance)


def test_persistent_offset_detected_after_window():
    det = ShiftDetector(tolerance=1.0, window=3, armed=True)
    base = np.ones(24)
    assert not det.observe(base, base)
    fired = [det.observe(base, base + 5.0) for _ in range(3)]
    assert fired == [False, False, True]
    assert not detect_shift(base, base, 1.0, window=1)
