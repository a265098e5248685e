"""Constant elasticity of substitution: a participant rates the relative
utility of two baskets of three goods on a censored [0,1] slider. The
latent preference is (rho, alpha simplex weights, log u).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .base import CENSORED_SLIDER, Model, OutcomeSupportError

LOG_2PI = np.log(2.0 * np.pi)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


@dataclass
class CesModel(Model):
    slider_tau: float = 0.005
    slider_eps: float = 2.0**-22
    logu_mean: float = 1.0
    logu_sd: float = 3.0
    basket_max: float = 100.0

    def __post_init__(self):
        self.name = "ces"
        self.theta_dim = 5  # (rho, alpha_1..3, log u)
        self.design_dim = 6  # two baskets of three goods
        self.outcome_kind = CENSORED_SLIDER
        self.reparameterizable = True
        self.theta_labels = ("rho", "alpha_1", "alpha_2", "alpha_3", "log_u")
        self.design_labels = (
            "basket_a_1", "basket_a_2", "basket_a_3",
            "basket_b_1", "basket_b_2", "basket_b_3",
        )
        if self.slider_tau <= 0 or not 0 < self.slider_eps < 0.5 or self.logu_sd <= 0:
            raise ValueError("ces constants out of range")

    def sample_prior(self, rng, n):
        rho = rng.uniform(0.0, 1.0, size=n)
        alpha = rng.dirichlet(np.ones(3), size=n)
        log_u = self.logu_mean + self.logu_sd * rng.standard_normal(n)
        return np.concatenate([rho[:, None], alpha, log_u[:, None]], axis=-1)

    def constrain_design(self, raw):
        return self.basket_max * _sigmoid(raw)

    def unconstrain_design(self, design):
        return _logit(np.asarray(design, dtype=np.float64) / self.basket_max)

    def constrain_grad(self, raw):
        s = _sigmoid(raw)
        return self.basket_max * s * (1.0 - s)

    # --- utility and slider-noise parameters -------------------------------
    def _eta_params(self, theta, design, with_grad: bool):
        theta = np.asarray(theta, dtype=np.float64)
        design = np.asarray(design, dtype=np.float64)
        rho = theta[..., 0]
        alpha = theta[..., 1:4]
        u = np.exp(theta[..., 4])
        xa, xb = design[..., :3], design[..., 3:]
        shape = np.broadcast_shapes(rho.shape, xa.shape[:-1])
        rho_b = np.broadcast_to(rho, shape)[..., None]
        alpha_b = np.broadcast_to(alpha, shape + (3,))

        def util(x):
            xb_ = np.broadcast_to(x, shape + (3,))
            s = (alpha_b * xb_**rho_b).sum(axis=-1)
            return np.exp(np.log(s) / rho_b[..., 0])

        ua, ub = util(xa), util(xb)
        diff = np.broadcast_to(xa - xb, shape + (3,))
        dist = np.sqrt((diff**2).sum(axis=-1))
        mu = (ua - ub) * u
        sigma = (1.0 + dist) * self.slider_tau * u
        if not with_grad:
            return mu, sigma, None, None
        # dU/dx_i = U^(1-rho) alpha_i x_i^(rho-1), sign +/- per basket
        def dutil(x, uval):
            xb_ = np.broadcast_to(x, shape + (3,))
            return uval[..., None] ** (1.0 - rho_b) * alpha_b * xb_ ** (rho_b - 1.0)

        dmu = np.concatenate([dutil(xa, ua), -dutil(xb, ub)], axis=-1) * u[..., None]
        safe = np.where(dist > 0, dist, 1.0)
        ddist = np.where(dist[..., None] > 0, diff / safe[..., None], 0.0)
        dsigma = (self.slider_tau * u)[..., None] * np.concatenate([ddist, -ddist], axis=-1)
        return mu, sigma, dmu, dsigma

    def _atoms(self):
        lo = self.slider_eps
        hi = 1.0 - self.slider_eps
        return lo, hi, _logit(lo), _logit(hi)

    def log_likelihood(self, theta, design, outcome):
        mu, sigma, _, _ = self._eta_params(theta, design, with_grad=False)
        if np.any(sigma <= 0):
            raise ValueError("slider noise scale must be positive")
        lo, hi, w_lo, w_hi = self._atoms()
        y = np.asarray(outcome, dtype=np.float64)
        y_b = np.broadcast_to(y, mu.shape)
        y_int = np.clip(y_b, lo * 1.000001, hi * 0.999999)
        w = _logit(y_int)
        interior = (
            -0.5 * ((w - mu) / sigma) ** 2
            - np.log(sigma)
            - 0.5 * LOG_2PI
            - np.log(y_int)
            - np.log1p(-y_int)
        )
        ll = np.where(
            y_b == lo,
            log_ndtr((w_lo - mu) / sigma),
            np.where(y_b == hi, log_ndtr((mu - w_hi) / sigma), interior),
        )
        return ll

    def loglik_design_grad(self, theta, design, outcome):
        mu, sigma, dmu, dsigma = self._eta_params(theta, design, with_grad=True)
        lo, hi, w_lo, w_hi = self._atoms()
        y = np.broadcast_to(np.asarray(outcome, dtype=np.float64), mu.shape)
        y_int = np.clip(y, lo * 1.000001, hi * 0.999999)
        w = _logit(y_int)
        resid = (w - mu) / sigma
        interior_ll = (
            -0.5 * resid**2 - np.log(sigma) - 0.5 * LOG_2PI
            - np.log(y_int) - np.log1p(-y_int)
        )
        interior_g = (resid / sigma)[..., None] * dmu + (
            (resid**2 - 1.0) / sigma
        )[..., None] * dsigma

        def atom(w_edge, sign):
            r = sign * (w_edge - mu) / sigma
            ll = log_ndtr(r)
            # d log Phi(r) = phi(r)/Phi(r) dr
            ratio = np.exp(-0.5 * r**2 - 0.5 * LOG_2PI - ll)
            dr = (sign * -dmu - r[..., None] * dsigma) / sigma[..., None]
            return ll, ratio[..., None] * dr

        ll_lo, g_lo = atom(w_lo, 1.0)
        ll_hi, g_hi = atom(w_hi, -1.0)
        is_lo = (y == lo)[..., None]
        is_hi = (y == hi)[..., None]
        ll = np.where(y == lo, ll_lo, np.where(y == hi, ll_hi, interior_ll))
        grad = np.where(is_lo, g_lo, np.where(is_hi, g_hi, interior_g))
        return ll, grad

    def loglik_outcome_grad(self, theta, design, outcome):
        mu, sigma, _, _ = self._eta_params(theta, design, with_grad=False)
        lo, hi, _, _ = self._atoms()
        y = np.broadcast_to(np.asarray(outcome, dtype=np.float64), mu.shape)
        y_int = np.clip(y, lo * 1.000001, hi * 0.999999)
        w = _logit(y_int)
        dw = 1.0 / (y_int * (1.0 - y_int))
        g = -((w - mu) / sigma**2) * dw - (1.0 - 2.0 * y_int) * dw
        return np.where((y == lo) | (y == hi), 0.0, g)

    def sample_outcome(self, theta, design, rng):
        mu, sigma, _, _ = self._eta_params(theta, design, with_grad=False)
        z = rng.standard_normal(mu.shape)
        lo, hi, _, _ = self._atoms()
        y = np.clip(_sigmoid(mu + sigma * z), lo, hi)
        return y, z

    def outcome_from_innovation(self, theta, design, z):
        mu, sigma, dmu, dsigma = self._eta_params(theta, design, with_grad=True)
        z = np.asarray(z, dtype=np.float64)
        eta = mu + sigma * z
        s = _sigmoid(eta)
        lo, hi, _, _ = self._atoms()
        y = np.clip(s, lo, hi)
        # hard censoring: no gradient through the clipped region
        interior = (s > lo) & (s < hi)
        dy = (s * (1.0 - s))[..., None] * (dmu + z[..., None] * dsigma)
        return y, np.where(interior[..., None], dy, 0.0)

    def outcome_support_text(self) -> str:
        lo, hi, _, _ = self._atoms()
        return f"a slider reading in [{lo:.3e}, {hi:.7f}]"

    def validate_outcome(self, value: float) -> float:
        v = float(value)
        lo, hi, _, _ = self._atoms()
        if not (lo <= v <= hi):
            raise OutcomeSupportError(
                f"outcome must be {self.outcome_support_text()}, got {value!r}"
            )
        return v

    def random_raw_scale(self) -> float:
        return 1.5
