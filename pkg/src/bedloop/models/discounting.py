"""Hyperbolic temporal discounting: binary accept/reject choices between an
immediate reward R and a delayed reward (100 units after D days), with a
participant-specific discount rate k and choice noise alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .base import BINARY_CHOICE, Model, OutcomeSupportError

RAW_DELAY_CAP = 50.0  # cap on xi_d before exp() to avoid overflow


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class DiscountingModel(Model):
    logk_mean: float = -4.25
    logk_sd: float = 1.5
    alpha_scale: float = 2.0  # HalfNormal scale
    lapse: float = 0.01
    delayed_reward: float = 100.0

    def __post_init__(self):
        self.name = "discounting"
        self.theta_dim = 2  # (log k, alpha)
        self.design_dim = 2  # (D days, R immediate reward)
        self.outcome_kind = BINARY_CHOICE
        self.reparameterizable = False
        self.theta_labels = ("log_k", "alpha")
        self.design_labels = ("delay_days", "reward_today")
        if self.logk_sd <= 0 or self.alpha_scale <= 0 or not 0 <= self.lapse < 0.5:
            raise ValueError("discounting constants out of range")

    def sample_prior(self, rng, n):
        logk = self.logk_mean + self.logk_sd * rng.standard_normal(n)
        alpha = np.abs(self.alpha_scale * rng.standard_normal(n))
        return np.stack([logk, alpha], axis=-1)

    # raw (xi_d, xi_r) -> (D, R) = (exp(xi_d), 100 sigmoid(xi_r))
    def constrain_design(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        d = np.exp(np.minimum(raw[..., 0], RAW_DELAY_CAP))
        r = self.delayed_reward * _sigmoid(raw[..., 1])
        return np.stack([d, r], axis=-1)

    def unconstrain_design(self, design):
        design = np.asarray(design, dtype=np.float64)
        frac = design[..., 1] / self.delayed_reward
        return np.stack([np.log(design[..., 0]), np.log(frac) - np.log1p(-frac)], axis=-1)

    def constrain_grad(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        dd = np.where(raw[..., 0] < RAW_DELAY_CAP, np.exp(np.minimum(raw[..., 0], RAW_DELAY_CAP)), 0.0)
        s = _sigmoid(raw[..., 1])
        return np.stack([dd, self.delayed_reward * s * (1.0 - s)], axis=-1)

    def choice_prob(self, theta, design):
        """p(choose delayed) = eps + (1-2 eps) Phi((V1 - V0)/alpha)."""
        theta = np.asarray(theta, dtype=np.float64)
        design = np.asarray(design, dtype=np.float64)
        k = np.exp(theta[..., 0])
        alpha = theta[..., 1]
        v1 = self.delayed_reward / (1.0 + k * design[..., 0])
        v0 = design[..., 1]
        return self.lapse + (1.0 - 2.0 * self.lapse) * ndtr((v1 - v0) / alpha)

    def log_likelihood(self, theta, design, outcome):
        p1 = self.choice_prob(theta, design)
        y = np.asarray(outcome, dtype=np.float64)
        return y * np.log(p1) + (1.0 - y) * np.log1p(-p1)

    def loglik_design_grad(self, theta, design, outcome):
        theta = np.asarray(theta, dtype=np.float64)
        design = np.asarray(design, dtype=np.float64)
        y = np.asarray(outcome, dtype=np.float64)
        k = np.exp(theta[..., 0])
        alpha = theta[..., 1]
        denom = 1.0 + k * design[..., 0]
        v1 = self.delayed_reward / denom
        z = (v1 - design[..., 1]) / alpha
        p1 = self.lapse + (1.0 - 2.0 * self.lapse) * ndtr(z)
        ll = y * np.log(p1) + (1.0 - y) * np.log1p(-p1)
        phi = np.exp(-0.5 * z**2) / np.sqrt(2.0 * np.pi)
        dp_dz = (1.0 - 2.0 * self.lapse) * phi
        coeff = (y / p1 - (1.0 - y) / (1.0 - p1)) * dp_dz
        dz_dd = -self.delayed_reward * k / denom**2 / alpha
        dz_dr = -1.0 / alpha
        grad = np.stack([coeff * dz_dd, coeff * dz_dr], axis=-1)
        return ll, grad

    def sample_outcome(self, theta, design, rng):
        p1 = self.choice_prob(theta, design)
        y = (rng.random(p1.shape) < p1).astype(np.float64)
        return y, None

    def outcome_support_text(self) -> str:
        return "0 (take the immediate reward) or 1 (take the delayed reward)"

    def validate_outcome(self, value: float) -> float:
        v = float(value)
        if v not in (0.0, 1.0):
            raise OutcomeSupportError(
                f"outcome must be {self.outcome_support_text()}, got {value!r}"
            )
        return v

    def random_raw_scale(self) -> float:
        return 1.5
