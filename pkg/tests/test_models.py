import numpy as np
import pytest
from scipy import integrate
from scipy.special import ndtr

from bedloop.models import (
    CesModel,
    DiscountingModel,
    History,
    LocationFindingModel,
    OutcomeSupportError,
    ToyModel,
    exact_eig_from_table,
    make_model,
    toy_enumerate,
    toy_preset,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# --- priors -------------------------------------------------------------------


def test_location_prior_moments():
    model = LocationFindingModel()
    n = 100_000
    thetas = model.sample_prior(rng(1), n)
    se_mean = 1.0 / np.sqrt(n)
    se_var = np.sqrt(2.0 / n)
    assert np.all(np.abs(thetas.mean(axis=0)) < 3 * se_mean)
    assert np.all(np.abs(thetas.var(axis=0) - 1.0) < 3 * se_var)


def test_discounting_prior_moments_and_support():
    model = DiscountingModel()
    thetas = model.sample_prior(rng(2), 100_000)
    assert np.all(thetas[:, 1] > 0)
    se = 1.5 / np.sqrt(100_000)
    assert abs(thetas[:, 0].mean() - (-4.25)) < 3 * se
    # half-normal with scale 2: mean = 2 sqrt(2/pi)
    hn_mean = 2.0 * np.sqrt(2.0 / np.pi)
    hn_sd = np.sqrt(4.0 * (1.0 - 2.0 / np.pi))
    assert abs(thetas[:, 1].mean() - hn_mean) < 3 * hn_sd / np.sqrt(100_000)


def test_ces_prior_support_constraints():
    model = CesModel()
    thetas = model.sample_prior(rng(3), 10_000)
    alpha = thetas[:, 1:4]
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(alpha >= 0)
    assert np.all((thetas[:, 0] > 0) & (thetas[:, 0] < 1))


def test_location_perturbed_prior_shifts_mean():
    model = LocationFindingModel()
    shifted = model.sample_perturbed(rng(4), 50_000, 3.0)
    assert np.all(np.abs(shifted.mean(axis=0) - 3.0) < 3 / np.sqrt(50_000) + 0.02)


def test_perturbed_zero_shift_bitwise_matches_prior():
    model = LocationFindingModel()
    a = model.sample_prior(rng(11), 1000)
    b = model.sample_perturbed(rng(11), 1000, 0.0)
    assert np.array_equal(a, b)


# --- design transforms -----------------------------------------------------------


def test_discounting_transform_center():
    model = DiscountingModel()
    design = model.constrain_design(np.array([0.0, 0.0]))
    np.testing.assert_allclose(design, [1.0, 50.0])


def test_discounting_transform_range_and_inverse():
    model = DiscountingModel()
    raws = rng(5).uniform(-8, 8, size=(100, 2))
    designs = model.constrain_design(raws)
    assert np.all(designs[:, 0] > 0)
    assert np.all((designs[:, 1] > 0) & (designs[:, 1] < 100))
    np.testing.assert_allclose(model.unconstrain_design(designs), raws, atol=1e-9)


def test_ces_transform_center_and_monotonicity():
    model = CesModel()
    np.testing.assert_allclose(model.constrain_design(np.zeros(6)), 50.0)
    xs = np.linspace(-4, 4, 50)[:, None] * np.ones(6)
    ys = model.constrain_design(xs)
    assert np.all(np.diff(ys, axis=0) > 0)


def test_constrain_grad_matches_fd():
    for model in (DiscountingModel(), CesModel(), LocationFindingModel()):
        raw = rng(6).uniform(-2, 2, size=model.raw_design_dim)
        h = 1e-6
        for j in range(model.raw_design_dim):
            up, dn = raw.copy(), raw.copy()
            up[j] += h
            dn[j] -= h
            fd = (model.constrain_design(up)[j] - model.constrain_design(dn)[j]) / (2 * h)
            an = model.constrain_grad(raw)[j]
            assert abs(fd - an) < 1e-5 * max(1.0, abs(fd))


# --- likelihoods ------------------------------------------------------------------


def test_location_intensity_closed_form():
    model = LocationFindingModel(n_sources=1, dim=2)
    theta = np.array([0.3, -0.7])
    mu = model.intensity(theta, theta.copy())
    assert mu == pytest.approx(0.1 + 1e8, rel=1e-12)


def test_location_likelihood_normalizes():
    model = LocationFindingModel()
    theta = model.sample_prior(rng(7), 1)[0]
    design = np.array([0.5, 0.5])
    total, _ = integrate.quad(
        lambda y: np.exp(model.log_likelihood(theta, design, y)), -20, 25, limit=200
    )
    assert abs(total - 1.0) < 1e-6


def test_discounting_indifference_point():
    model = DiscountingModel()
    # k=0.01, D=100 -> V1 = 100/2 = 50 = R
    theta = np.array([np.log(0.01), 1.3])
    design = np.array([100.0, 50.0])
    p = model.choice_prob(theta, design)
    assert p == pytest.approx(0.5, abs=1e-12)
    for y in (0.0, 1.0):
        assert model.log_likelihood(theta, design, y) == pytest.approx(np.log(0.5), abs=1e-12)


def test_discounting_likelihood_sums_to_one():
    model = DiscountingModel()
    thetas = model.sample_prior(rng(8), 50)
    designs = model.constrain_design(rng(9).uniform(-3, 3, size=(50, 2)))
    p1 = np.exp(model.log_likelihood(thetas, designs, np.ones(50)))
    p0 = np.exp(model.log_likelihood(thetas, designs, np.zeros(50)))
    np.testing.assert_allclose(p0 + p1, 1.0, atol=1e-12)


def test_ces_censored_likelihood_normalizes():
    model = CesModel()
    theta = np.array([0.5, 0.4, 0.35, 0.25, 1.2])
    design = model.constrain_design(rng(10).uniform(-1.5, 1.5, 6))
    lo = model.slider_eps
    hi = 1.0 - lo
    atom_mass = np.exp(model.log_likelihood(theta, design, lo)) + np.exp(
        model.log_likelihood(theta, design, hi)
    )
    # integrate the interior in logit space (smooth Gaussian integrand)
    mu, sigma, _, _ = model._eta_params(theta, design, with_grad=False)

    def interior_density_w(w):
        y = 1.0 / (1.0 + np.exp(-w))
        dens_y = np.exp(model.log_likelihood(theta, design, y))
        return dens_y * y * (1.0 - y)  # dy = y(1-y) dw

    w_lo = np.log(lo) - np.log1p(-lo)
    w_hi = np.log(hi) - np.log1p(-hi)
    total, _ = integrate.quad(
        interior_density_w, max(w_lo, mu - 10 * sigma), min(w_hi, mu + 10 * sigma), limit=300
    )
    assert abs(float(atom_mass) + total - 1.0) < 1e-6


def test_ces_equal_baskets_symmetric():
    model = CesModel()
    theta = np.array([0.7, 0.3, 0.3, 0.4, 0.5])
    design = np.array([40.0, 50.0, 60.0, 40.0, 50.0, 60.0])
    mu, sigma, _, _ = model._eta_params(theta, design, with_grad=False)
    assert mu == pytest.approx(0.0, abs=1e-10)
    # boundary atoms are symmetric when mu = 0
    lo = model.slider_eps
    a = model.log_likelihood(theta, design, lo)
    b = model.log_likelihood(theta, design, 1.0 - lo)
    assert a == pytest.approx(b, rel=1e-10)


def test_ces_likelihood_design_grad_matches_fd():
    model = CesModel()
    theta = np.array([0.45, 0.5, 0.2, 0.3, 0.8])
    design = model.constrain_design(rng(12).uniform(-1, 1, 6))
    for outcome in (0.42, model.slider_eps, 1.0 - model.slider_eps):
        _, grad = model.loglik_design_grad(theta, design, outcome)
        h = 1e-6
        for j in range(6):
            up, dn = design.copy(), design.copy()
            up[j] += h
            dn[j] -= h
            fd = (
                model.log_likelihood(theta, up, outcome)
                - model.log_likelihood(theta, dn, outcome)
            ) / (2 * h)
            assert abs(grad[j] - fd) < 1e-4 * max(1.0, abs(fd))


def test_location_likelihood_design_grad_matches_fd():
    model = LocationFindingModel(n_sources=2)
    theta = model.sample_prior(rng(13), 1)[0]
    design = np.array([0.4, -0.2])
    outcome = 0.3
    _, grad = model.loglik_design_grad(theta, design, outcome)
    h = 1e-6
    for j in range(2):
        up, dn = design.copy(), design.copy()
        up[j] += h
        dn[j] -= h
        fd = (
            model.log_likelihood(theta, up, outcome) - model.log_likelihood(theta, dn, outcome)
        ) / (2 * h)
        assert abs(grad[j] - fd) < 1e-6 * max(1.0, abs(fd))


def test_discounting_likelihood_design_grad_matches_fd():
    model = DiscountingModel()
    theta = np.array([-3.0, 1.5])
    design = np.array([30.0, 60.0])
    for y in (0.0, 1.0):
        _, grad = model.loglik_design_grad(theta, design, y)
        h = 1e-5
        for j in range(2):
            up, dn = design.copy(), design.copy()
            up[j] += h
            dn[j] -= h
            fd = (
                model.log_likelihood(theta, up, y) - model.log_likelihood(theta, dn, y)
            ) / (2 * h)
            assert abs(grad[j] - fd) < 1e-5 * max(1.0, abs(fd))


# --- sampling ------------------------------------------------------------------------


def test_location_noiseless_outcome():
    model = LocationFindingModel(noise_sd=0.0)
    theta = np.array([1.0, 1.0])
    design = np.array([0.0, 0.0])
    y, z = model.sample_outcome(theta, design, rng(14))
    assert y == pytest.approx(np.log(model.intensity(theta, design)), rel=1e-14)


def test_discounting_lapse_rate_limit():
    # k -> 0 makes V1 = 100 > R, so p(accept) -> 1 - lapse
    model = DiscountingModel()
    theta = np.tile([-30.0, 0.5], (100_000, 1))
    design = np.tile([10.0, 1e-6], (100_000, 1))
    y, _ = model.sample_outcome(theta, design, rng(15))
    p_hat = y.mean()
    se = np.sqrt(0.99 * 0.01 / 100_000)
    assert abs(p_hat - 0.99) < 3 * se


def test_ces_censoring_saturates():
    model = CesModel()
    # huge utility gap with tiny noise: outcome pegs at the upper clip
    theta = np.array([0.9, 0.5, 0.3, 0.2, 3.0])
    design = np.array([90.0, 90.0, 90.0, 1.0, 1.0, 1.0])
    y, _ = model.sample_outcome(theta, design, rng(16))
    assert y == 1.0 - model.slider_eps


def test_reparam_consistency_and_design_derivative():
    for model, design in (
        (LocationFindingModel(), np.array([0.3, 0.8])),
        (CesModel(), CesModel().constrain_design(rng(18).uniform(-0.5, 0.5, 6))),
    ):
        theta = model.sample_prior(rng(17), 1)[0]
        z = 0.37
        y1, dy = model.outcome_from_innovation(theta, design, z)
        y2, _ = model.outcome_from_innovation(theta, design, z)
        assert np.array_equal(y1, y2)
        if isinstance(model, CesModel) and (y1 == model.slider_eps or y1 == 1 - model.slider_eps):
            continue  # censored: derivative is defined as zero there
        h = 1e-6
        for j in range(model.design_dim):
            up, dn = design.copy(), design.copy()
            up[j] += h
            dn[j] -= h
            fd = (
                model.outcome_from_innovation(theta, up, z)[0]
                - model.outcome_from_innovation(theta, dn, z)[0]
            ) / (2 * h)
            assert abs(dy[j] - fd) < 1e-5 * max(1.0, abs(fd))


def test_outcome_validation():
    with pytest.raises(OutcomeSupportError):
        DiscountingModel().validate_outcome(2.0)
    with pytest.raises(OutcomeSupportError):
        CesModel().validate_outcome(-0.1)
    with pytest.raises(OutcomeSupportError):
        LocationFindingModel().validate_outcome(float("nan"))
    assert DiscountingModel().validate_outcome(1.0) == 1.0


# --- toy model and enumeration ----------------------------------------------------------


def binary_channel_eig(reliability):
    """Independent closed form: ln 2 - binary entropy of the channel."""
    h = -(reliability * np.log(reliability) + (1 - reliability) * np.log(1 - reliability))
    return np.log(2.0) - h


def test_toy_binary_channel_exact_eig():
    model = toy_preset("binary")
    table = toy_enumerate(model, lambda h: np.zeros(1), 1)
    assert exact_eig_from_table(table) == pytest.approx(binary_channel_eig(0.9), abs=1e-12)
    assert exact_eig_from_table(table) == pytest.approx(0.3680, abs=1e-4)


def test_toy_flat_channel_no_information():
    model = toy_preset("flat")
    for horizon in (1, 2, 3):
        table = toy_enumerate(model, lambda h: np.zeros(1), horizon)
        assert exact_eig_from_table(table) == pytest.approx(0.0, abs=1e-14)


def test_toy_deterministic_channel_full_revelation():
    model = toy_preset("deterministic")
    table = toy_enumerate(model, lambda h: np.zeros(1), 1)
    assert exact_eig_from_table(table) == pytest.approx(np.log(2.0), abs=1e-14)


def test_toy_joint_table_marginals_reproduce_prior():
    model = toy_preset("peaked")
    table = toy_enumerate(model, lambda h: np.array([0.5 * len(h)]), 3)
    joint = table.joint()  # (H, M)
    np.testing.assert_allclose(joint.sum(axis=0), table.prior, atol=1e-14)
    assert abs(joint.sum() - 1.0) < 1e-12


def test_toy_table_size_guard():
    model = toy_preset("binary")
    with pytest.raises(ValueError, match="too large"):
        toy_enumerate(model, lambda h: np.zeros(1), 25)


def test_toy_likelihood_rows_sum_to_one():
    model = toy_preset("peaked")
    table = model.likelihood_table(np.array([0.7]))
    np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-15)


def test_toy_design_grad_matches_fd():
    model = toy_preset("peaked")
    theta = np.array([1.0])
    for y, xi in ((1.0, 0.3), (0.0, 1.7)):
        design = np.array([xi])
        _, grad = model.loglik_design_grad(theta, design, y)
        h = 1e-6
        fd = (
            model.log_likelihood(theta, design + h, y)
            - model.log_likelihood(theta, design - h, y)
        ) / (2 * h)
        assert abs(grad[0] - fd) < 1e-6 * max(1.0, abs(fd))


def test_make_model_registry():
    assert make_model("toy-binary").name == "toy"
    assert make_model("location", n_sources=2).theta_dim == 4
    with pytest.raises(ValueError):
        make_model("unknown")
