"""Importance-sampling posterior over the latent parameters: prior-proposal
particles weighted by the observed history's outcome likelihoods, with
multinomial resampling and effective-sample-size diagnostics.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .models.base import History, Model

logger = logging.getLogger(__name__)

LOW_ESS_FRACTION = 0.05


class DegenerateWeightsError(RuntimeError):
    """Every particle has zero posterior weight under the observed history."""


@dataclass
class ParticlePosterior:
    thetas: np.ndarray  # (n, theta_dim)
    log_weights: np.ndarray  # (n,), normalized: logsumexp == 0
    history_len: int

    @property
    def n(self) -> int:
        return self.thetas.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def ess(self) -> float:
        return ess(self)

    def mean(self) -> np.ndarray:
        return self.weights @ self.thetas

    def quantiles(self, qs=(0.05, 0.5, 0.95)) -> np.ndarray:
        """Weighted marginal quantiles, one row per requested q."""
        w = self.weights
        out = np.empty((len(qs), self.thetas.shape[1]))
        for j in range(self.thetas.shape[1]):
            order = np.argsort(self.thetas[:, j])
            cum = np.cumsum(w[order])
            for i, q in enumerate(qs):
                idx = int(np.searchsorted(cum, q))
                out[i, j] = self.thetas[order[min(idx, self.n - 1)], j]
        return out


def fit_posterior_is(
    model: Model, history: History, n_samples: int, rng: np.random.Generator
) -> ParticlePosterior:
    """Self-normalized importance sampling with the prior as proposal.

    Designs are deterministic given the policy and history, so importance
    weights use outcome likelihoods only.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 particles")
    thetas = model.sample_prior(rng, n_samples)
    if len(history) == 0:
        logw = np.full(n_samples, -np.log(n_samples))
        return ParticlePosterior(thetas=thetas, log_weights=logw, history_len=0)
    designs = history.design_matrix(model.design_dim)
    outcomes = history.outcome_vector()
    logw = np.zeros(n_samples)
    for t in range(len(history)):
        logw += model.log_likelihood(thetas, designs[t], outcomes[t])
    if not np.any(np.isfinite(logw)):
        raise DegenerateWeightsError(
            "history is impossible under every particle; increase n_samples"
        )
    logw = logw - logsumexp(logw)
    post = ParticlePosterior(thetas=thetas, log_weights=logw, history_len=len(history))
    if post.ess < LOW_ESS_FRACTION * n_samples:
        logger.warning(
            "posterior ESS %.1f below %.0f%% of %d particles",
            post.ess, 100 * LOW_ESS_FRACTION, n_samples,
        )
    return post


def resample(
    posterior: ParticlePosterior, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Multinomial draws (with replacement) on the normalized weights."""
    if posterior.n == 0:
        raise ValueError("empty posterior")
    idx = rng.choice(posterior.n, size=n, replace=True, p=posterior.weights)
    return posterior.thetas[idx]


def ess(posterior: ParticlePosterior) -> float:
    """Effective sample size 1 / sum(w_i^2)."""
    return float(1.0 / np.exp(logsumexp(2.0 * posterior.log_weights)))


def from_weighted(thetas: np.ndarray, weights: np.ndarray, history_len: int = 0) -> ParticlePosterior:
    """Build a posterior from explicit (theta, weight) pairs (weights renormalized)."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive total")
    with np.errstate(divide="ignore"):
        logw = np.log(w / w.sum())
    return ParticlePosterior(
        thetas=np.atleast_2d(np.asarray(thetas, dtype=np.float64)),
        log_weights=logw,
        history_len=history_len,
    )


def write_posterior_csv(path, posterior: ParticlePosterior, labels: tuple[str, ...]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*labels, "weight"])
        w = posterior.weights
        for i in range(posterior.n):
            writer.writerow([repr(v) for v in posterior.thetas[i]] + [repr(w[i])])
    return path
