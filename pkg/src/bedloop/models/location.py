"""Source location finding: infer K hidden source positions from noisy
log-intensity readings of their combined inverse-square signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import CONTINUOUS_LOG_INTENSITY, Model

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class LocationFindingModel(Model):
    n_sources: int = 1
    dim: int = 2
    alpha: float = 1.0
    max_signal: float = 1e-4  # softening constant inside the inverse-square law
    base_signal: float = 0.1
    noise_sd: float = 0.5

    def __post_init__(self):
        self.name = "location"
        self.theta_dim = self.n_sources * self.dim
        self.design_dim = self.dim
        self.outcome_kind = CONTINUOUS_LOG_INTENSITY
        self.reparameterizable = True
        self.theta_labels = tuple(
            f"source{k}_{ax}" for k in range(self.n_sources) for ax in range(self.dim)
        )
        self.design_labels = tuple(f"probe_{ax}" for ax in range(self.dim))
        if self.noise_sd < 0 or self.max_signal <= 0 or self.base_signal < 0:
            raise ValueError("location-finding constants out of range")

    # theta_k iid standard normal per coordinate
    def sample_prior(self, rng, n):
        return rng.standard_normal((n, self.theta_dim))

    def supports_perturbation(self) -> bool:
        return True

    def sample_perturbed(self, rng, n, spec):
        shift = float(spec)
        return rng.standard_normal((n, self.theta_dim)) + shift

    # designs live directly in R^dim
    def intensity(self, theta, design):
        """mu(theta, xi) = b + sum_k alpha / (m + |theta_k - xi|)^2."""
        theta = np.asarray(theta, dtype=np.float64)
        design = np.asarray(design, dtype=np.float64)
        sources = theta.reshape(theta.shape[:-1] + (self.n_sources, self.dim))
        diff = sources - design[..., None, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        return self.base_signal + (self.alpha / (self.max_signal + dist) ** 2).sum(axis=-1)

    def _log_mu_and_grad(self, theta, design):
        theta = np.asarray(theta, dtype=np.float64)
        design = np.asarray(design, dtype=np.float64)
        sources = theta.reshape(theta.shape[:-1] + (self.n_sources, self.dim))
        diff = design[..., None, :] - sources  # (..., K, dim), sign: d dist/d xi
        dist = np.sqrt((diff**2).sum(axis=-1))
        denom = self.max_signal + dist
        mu = self.base_signal + (self.alpha / denom**2).sum(axis=-1)
        # d mu / d xi = sum_k -2 alpha (m+dist)^-3 * (xi - theta_k)/dist
        safe = np.where(dist > 0, dist, 1.0)
        dmu = (-2.0 * self.alpha / denom**3 / safe)[..., None] * diff
        dmu = np.where(dist[..., None] > 0, dmu, 0.0).sum(axis=-2)
        return np.log(mu), dmu / mu[..., None]

    def log_likelihood(self, theta, design, outcome):
        if self.noise_sd <= 0:
            raise ValueError("noise_sd must be positive to evaluate the likelihood")
        log_mu = np.log(self.intensity(theta, design))
        resid = (np.asarray(outcome, dtype=np.float64) - log_mu) / self.noise_sd
        return -0.5 * resid**2 - np.log(self.noise_sd) - 0.5 * LOG_2PI

    def loglik_design_grad(self, theta, design, outcome):
        log_mu, dlog_mu = self._log_mu_and_grad(theta, design)
        resid = (np.asarray(outcome, dtype=np.float64) - log_mu) / self.noise_sd**2
        ll = -0.5 * (self.noise_sd * resid) ** 2 - np.log(self.noise_sd) - 0.5 * LOG_2PI
        return ll, resid[..., None] * dlog_mu

    def loglik_outcome_grad(self, theta, design, outcome):
        log_mu = np.log(self.intensity(theta, design))
        return -(np.asarray(outcome, dtype=np.float64) - log_mu) / self.noise_sd**2

    # outcome value is the log intensity itself
    def sample_outcome(self, theta, design, rng):
        z = rng.standard_normal(np.broadcast_shapes(
            np.asarray(theta).shape[:-1], np.asarray(design).shape[:-1]
        ))
        y = np.log(self.intensity(theta, design)) + self.noise_sd * z
        return y, z

    def outcome_from_innovation(self, theta, design, z):
        log_mu, dlog_mu = self._log_mu_and_grad(theta, design)
        return log_mu + self.noise_sd * np.asarray(z), dlog_mu

    def outcome_support_text(self) -> str:
        return "a finite log-intensity reading"

    def random_raw_scale(self) -> float:
        return 2.0
