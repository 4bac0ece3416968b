import math
import warnings

import numpy as np
import pytest

import predictor as pr
import transform as tf
from schedule import from_alpha_bar
from utils.rng import Substream


def one_d(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1, 1)


def test_marginal_identity_at_full_signal(sym_mixture):
    assert pr.marginal_mixture(sym_mixture, 1.0) is sym_mixture


def test_marginal_of_standard_normal_is_fixed(grid):
    mix = pr.GaussianMixture.standard_normal(grid)
    out = pr.marginal_mixture(mix, 0.3)
    np.testing.assert_array_equal(out.means, 0.0)
    np.testing.assert_allclose(out.sigmas, [1.0], atol=1e-15)


def test_marginal_formula():
    mix = pr.GaussianMixture(weights=[1.0], means=one_d([2.0, 0.0])[None], sigmas=[1.0])
    out = pr.marginal_mixture(mix, 0.25)
    np.testing.assert_allclose(out.means[0].ravel(), [1.0, 0.0])
    assert out.sigmas[0] == pytest.approx(1.0)


@pytest.mark.parametrize("a", [0.0, -0.1, 1.5])
def test_marginal_rejects_bad_alpha(sym_mixture, a):
    with pytest.raises(ValueError):
        pr.marginal_mixture(sym_mixture, a)


def test_standard_normal_score_is_minus_x(grid, latent):
    x = latent(1)
    np.testing.assert_allclose(pr.score(pr.GaussianMixture.standard_normal(grid), x), -x, atol=1e-15)


def test_score_vanishes_at_sole_mean(grid):
    mean = pr.mean_pattern("ring", grid)
    mix = pr.GaussianMixture(weights=[1.0], means=mean[None], sigmas=[0.3])
    np.testing.assert_allclose(pr.score(mix, mean), 0.0, atol=1e-15)


def test_score_symmetric_pair_at_origin():
    mix = pr.GaussianMixture(weights=[0.5, 0.5], means=np.stack([one_d([1.0]), one_d([-1.0])]), sigmas=[1.0, 1.0])
    assert pr.score(mix, one_d([0.0]))[0, 0, 0] == pytest.approx(0.0, abs=1e-15)


def test_score_far_from_all_components_is_finite(sym_mixture, grid):
    x = np.full(grid, 1e3)
    s = pr.score(sym_mixture, x)
    assert np.all(np.isfinite(s))


def test_score_rejects_non_finite(sym_mixture, grid):
    x = np.zeros(grid)
    x[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        pr.score(sym_mixture, x)


def test_score_is_gradient_of_log_density(sym_mixture, latent):
    x = latent(4)
    h = 1e-5
    s = pr.score(sym_mixture, x)
    for idx in [(0, 0, 0), (3, 5, 0), (7, 7, 0)]:
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        fd = (pr.log_density(sym_mixture, up) - pr.log_density(sym_mixture, down)) / (2 * h)
        assert s[idx] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_predict_noise_standard_normal_closed_form(grid, latent, sched):
    cfg = pr.PredictorConfig(mixture=pr.GaussianMixture.standard_normal(grid))
    x = latent(2)
    for t in (1, 10, 50):
        expected = math.sqrt(1 - sched.alpha_bar[t]) * x
        np.testing.assert_allclose(pr.predict_noise(cfg, sched, x, t), expected, atol=1e-14)


def test_constant_mode_ignores_input(grid, latent, sched):
    cfg = pr.PredictorConfig(constant=np.zeros(grid))
    np.testing.assert_array_equal(pr.predict_noise(cfg, sched, latent(3), 7), 0.0)


def test_perturbation_adds_sinusoid(sym_mixture, latent, sched):
    x = latent(5)
    exact = pr.PredictorConfig(mixture=sym_mixture)
    bent = pr.PredictorConfig(mixture=sym_mixture, gamma=0.05, omega=2.0)
    diff = pr.predict_noise(bent, sched, x, 20) - pr.predict_noise(exact, sched, x, 20)
    np.testing.assert_allclose(diff, 0.05 * np.sin(2.0 * x), atol=1e-13)
    assert exact.exact and not bent.exact


def test_predict_noise_is_deterministic(perturbed, latent, sched):
    x = latent(6)
    a = pr.predict_noise(perturbed, sched, x, 30)
    b = pr.predict_noise(perturbed, sched, x.copy(), 30)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("t", [0, 51])
def test_predict_noise_index_range(perturbed, latent, sched, t):
    with pytest.raises(ValueError):
        pr.predict_noise(perturbed, sched, latent(), t)


def test_symmetrize_rotation_orbit(sym_mixture):
    assert sym_mixture.num_components == 4
    np.testing.assert_allclose(sym_mixture.weights, 0.25)


def test_symmetrize_identity_group(grid):
    mix = pr.GaussianMixture(weights=[0.4, 0.6], means=np.stack([pr.mean_pattern("ramp", grid),
                                                                  pr.mean_pattern("stripe", grid)]),
                             sigmas=[0.5, 0.5])
    out = pr.symmetrize(mix, [tf.IDENTITY])
    np.testing.assert_allclose(out.weights, mix.weights)
    np.testing.assert_array_equal(out.means, mix.means)


def test_symmetrize_keeps_invariant_mean(grid):
    ring = pr.GaussianMixture(weights=[1.0], means=pr.mean_pattern("ring", grid)[None], sigmas=[0.5])
    out = pr.symmetrize(ring, [tf.rotation(1), tf.TransformSpec("flip-h")])
    assert out.num_components == 1


def test_symmetrize_merges_duplicates_with_warning(grid):
    blob = pr.mean_pattern("corner-blob", grid)
    turned = tf.apply(tf.rotation(1), blob)
    mix = pr.GaussianMixture(weights=[0.5, 0.5], means=np.stack([blob, turned]), sigmas=[0.5, 0.5])
    with pytest.warns(UserWarning, match="merged"):
        out = pr.symmetrize(mix, [tf.rotation(1)])
    assert out.num_components == 4
    np.testing.assert_allclose(out.weights, 0.25)


def test_symmetrize_rejects_value_jitter(sym_mixture):
    with pytest.raises(ValueError):
        pr.symmetrize(sym_mixture, [tf.TransformSpec("value-jitter", scale=1.1)])


def test_symmetrized_density_is_invariant(sym_mixture, latent):
    x = latent(8)
    base = pr.log_density(sym_mixture, x)
    for k in (1, 2, 3):
        assert pr.log_density(sym_mixture, tf.apply(tf.rotation(k), x)) == pytest.approx(base, rel=1e-12)


def test_equivariance_on_symmetrized_mixture(sym_mixture, latent, sched):
    cfg = pr.PredictorConfig(mixture=sym_mixture)
    x = latent(9)
    for k in (1, 2, 3):
        g = tf.rotation(k)
        lhs = pr.predict_noise(cfg, sched, tf.apply(g, x), 25)
        rhs = tf.apply(g, pr.predict_noise(cfg, sched, x, 25))
        assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_mixture_validation(grid):
    means = np.zeros((2,) + grid)
    with pytest.raises(ValueError):
        pr.GaussianMixture(weights=[0.5, 0.6], means=means, sigmas=[1, 1])
    with pytest.raises(ValueError):
        pr.GaussianMixture(weights=[0.5, 0.5], means=means, sigmas=[1, 0])
    with pytest.raises(ValueError):
        pr.GaussianMixture(weights=[1.0], means=np.zeros(grid), sigmas=[1])


def test_predictor_config_requires_mixture_or_constant():
    with pytest.raises(ValueError):
        pr.PredictorConfig()
    with pytest.raises(ValueError):
        pr.PredictorConfig(constant=np.zeros((2, 2, 1)), gamma=-1)


def test_sample_mixture_reproducible(sym_mixture):
    a = pr.sample_mixture(sym_mixture, Substream(3, "x0", 0), 5)
    b = pr.sample_mixture(sym_mixture, Substream(3, "x0", 0), 5)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (5,) + sym_mixture.shape


def test_sample_mixture_moments(grid):
    mix = pr.GaussianMixture(weights=[1.0], means=np.full((1,) + grid, 2.0), sigmas=[0.5])
    draws = pr.sample_mixture(mix, Substream(11, "moments"), 400)
    assert draws.mean() == pytest.approx(2.0, abs=0.02)
    assert draws.std() == pytest.approx(0.5, abs=0.02)


@pytest.mark.parametrize("name", pr.PATTERNS)
def test_mean_patterns_have_grid_shape(name, grid):
    assert pr.mean_pattern(name, grid).shape == grid


def test_ring_pattern_is_d4_invariant(grid):
    ring = pr.mean_pattern("ring", grid)
    for g in (tf.rotation(1), tf.TransformSpec("flip-h"), tf.TransformSpec("flip-v")):
        np.testing.assert_array_equal(tf.apply(g, ring), ring)


def test_unknown_pattern(grid):
    with pytest.raises(ValueError, match="Unknown mean pattern"):
        pr.mean_pattern("spiral", grid)


def test_high_noise_end_uses_log_space(sym_mixture):
    sched = from_alpha_bar([0.999, 1e-6])
    cfg = pr.PredictorConfig(mixture=sym_mixture)
    x = np.full(sym_mixture.shape, 40.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = pr.predict_noise(cfg, sched, x, 1)
    assert np.all(np.isfinite(out))
