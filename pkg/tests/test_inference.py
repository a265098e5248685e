import numpy as np
import pytest

from bedloop.inference import (
    DegenerateWeightsError,
    ParticlePosterior,
    ess,
    fit_posterior_is,
    from_weighted,
    resample,
    write_posterior_csv,
)
from bedloop.models import History, toy_preset
from bedloop.models.base import CONTINUOUS_LOG_INTENSITY, Model


class ConjugateGaussianModel(Model):
    """theta ~ N(0,1), y ~ N(theta, 1); design ignored. Posterior after one
    observation y is N(y/2, 1/2) in closed form."""

    name = "conjugate"
    theta_dim = 1
    design_dim = 1
    outcome_kind = CONTINUOUS_LOG_INTENSITY
    design_labels = ("probe",)
    theta_labels = ("theta",)

    def sample_prior(self, rng, n):
        return rng.standard_normal((n, 1))

    def log_likelihood(self, theta, design, outcome):
        resid = np.asarray(outcome, dtype=np.float64) - np.asarray(theta)[..., 0]
        return -0.5 * resid**2 - 0.5 * np.log(2 * np.pi)


def one_obs_history(y=1.0):
    h = History()
    h.append(np.zeros(1), y)
    return h


def rng(seed=0):
    return np.random.default_rng(seed)


def test_empty_history_gives_uniform_weights():
    model = ConjugateGaussianModel()
    post = fit_posterior_is(model, History(), 500, rng(1))
    np.testing.assert_allclose(post.weights, 1.0 / 500, atol=1e-15)
    assert post.ess == pytest.approx(500.0, rel=1e-12)


def test_theta_independent_likelihood_keeps_weights_uniform():
    model = toy_preset("flat")
    h = History()
    h.append(np.zeros(1), 1.0)
    h.append(np.zeros(1), 0.0)
    post = fit_posterior_is(model, h, 256, rng(2))
    np.testing.assert_allclose(post.weights, 1.0 / 256, atol=1e-15)
    assert post.ess == pytest.approx(256.0, rel=1e-12)


def test_conjugate_posterior_mean():
    model = ConjugateGaussianModel()
    post = fit_posterior_is(model, one_obs_history(1.0), 100_000, rng(3))
    mean = float(post.mean()[0])
    # weighted-mean standard error via the delta method on IS weights
    w = post.weights
    dev = post.thetas[:, 0] - mean
    se = np.sqrt(np.sum((w * dev) ** 2))
    assert abs(mean - 0.5) < 3 * se


def test_is_error_shrinks_with_more_particles():
    model = ConjugateGaussianModel()
    errors = []
    for n in (1_000, 10_000, 100_000):
        vals = []
        for seed in range(8):
            post = fit_posterior_is(model, one_obs_history(1.0), n, rng(100 + seed))
            vals.append(abs(float(post.mean()[0]) - 0.5))
        errors.append(np.mean(vals))
    assert errors[0] > errors[1] > errors[2] * 0.9  # monotone within noise


def test_weights_invariant_to_loglik_constant():
    thetas = np.array([[0.0], [1.0], [2.0]])
    logw = np.array([-1.0, -2.0, -3.0])
    a = from_weighted(thetas, np.exp(logw))
    b = from_weighted(thetas, np.exp(logw + 7.0))
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-14)


def test_degenerate_history_raises():
    model = toy_preset("deterministic")  # p(y=theta)=1, so y contradicting theta kills all
    h = History()
    h.append(np.zeros(1), 1.0)
    h.append(np.zeros(1), 0.0)  # impossible under both atoms
    with pytest.raises(DegenerateWeightsError, match="n_samples"):
        fit_posterior_is(model, h, 64, rng(4))


# --- resampling -------------------------------------------------------------------


def test_resample_single_particle():
    post = from_weighted(np.array([[3.0]]), [1.0])
    draws = resample(post, 50, rng(5))
    assert np.all(draws == 3.0)


def test_resample_two_particle_frequencies():
    post = from_weighted(np.array([[0.0], [1.0]]), [0.9, 0.1])
    draws = resample(post, 100_000, rng(6))
    freq = (draws[:, 0] == 0.0).mean()
    assert abs(freq - 0.9) < 3 * np.sqrt(0.9 * 0.1 / 100_000)


def test_resample_uniform_weights():
    n = 4
    post = from_weighted(np.arange(n)[:, None].astype(float), np.ones(n) / n)
    draws = resample(post, 100_000, rng(7))
    for v in range(n):
        freq = (draws[:, 0] == v).mean()
        assert abs(freq - 0.25) < 3 * np.sqrt(0.25 * 0.75 / 100_000)


# --- effective sample size -------------------------------------------------------------


def test_ess_uniform():
    post = from_weighted(np.zeros((10, 1)), np.ones(10) / 10)
    assert ess(post) == pytest.approx(10.0, rel=1e-12)


def test_ess_degenerate():
    post = from_weighted(np.zeros((5, 1)), [1.0, 0.0, 0.0, 0.0, 0.0])
    assert ess(post) == pytest.approx(1.0, rel=1e-12)


def test_ess_half_half():
    post = from_weighted(np.zeros((4, 1)), [0.5, 0.5, 0.0, 0.0])
    assert ess(post) == pytest.approx(2.0, rel=1e-12)


def test_posterior_quantiles_and_csv(tmp_path):
    g = rng(8)
    thetas = g.standard_normal((5000, 2))
    post = from_weighted(thetas, np.ones(5000) / 5000)
    qs = post.quantiles((0.05, 0.5, 0.95))
    assert abs(qs[1, 0]) < 0.1 and abs(qs[1, 1]) < 0.1
    assert 1.4 < qs[2, 0] < 1.9
    path = write_posterior_csv(tmp_path / "post.csv", post, ("a", "b"))
    lines = path.read_text().splitlines()
    assert lines[0] == "a,b,weight"
    assert len(lines) == 5001
