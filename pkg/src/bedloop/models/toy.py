"""Discrete toy model for exact oracles: a binary-outcome channel over a
finite latent support whose reliability may depend smoothly on a scalar
design through a Gaussian bump. Small enough to enumerate every history.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .base import BINARY_CHOICE, History, Model, OutcomeSupportError

MAX_TABLE_CELLS = 1_000_000


@dataclass
class ToyModel(Model):
    support: tuple[float, ...] = (0.0, 1.0)
    prior_masses: tuple[float, ...] = (0.5, 0.5)
    p_base: tuple[float, ...] = (0.1, 0.9)  # p(y=1 | theta_m) away from the bump
    p_gain: tuple[float, ...] = (0.0, 0.0)  # added at the bump peak
    peak: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        self.name = "toy"
        self.theta_dim = 1
        self.design_dim = 1
        self.outcome_kind = BINARY_CHOICE
        self.reparameterizable = False
        self.theta_labels = ("theta",)
        self.design_labels = ("probe",)
        self._support = np.asarray(self.support, dtype=np.float64)
        self._prior = np.asarray(self.prior_masses, dtype=np.float64)
        self._base = np.asarray(self.p_base, dtype=np.float64)
        self._gain = np.asarray(self.p_gain, dtype=np.float64)
        if not np.all(np.diff(self._support) > 0):
            raise ValueError("toy support must be sorted and unique")
        if abs(self._prior.sum() - 1.0) > 1e-12 or np.any(self._prior < 0):
            raise ValueError("prior masses must form a distribution")
        hi = self._base + np.maximum(self._gain, 0.0)
        lo = self._base + np.minimum(self._gain, 0.0)
        if np.any(lo < 0) or np.any(hi > 1):
            raise ValueError("channel probabilities must stay in [0, 1]")
        if self.width <= 0:
            raise ValueError("bump width must be positive")

    @property
    def n_atoms(self) -> int:
        return self._support.size

    def atoms(self) -> np.ndarray:
        return self._support[:, None].copy()

    def theta_index(self, theta) -> np.ndarray:
        vals = np.asarray(theta, dtype=np.float64)[..., 0]
        idx = np.searchsorted(self._support, vals)
        idx = np.clip(idx, 0, self.n_atoms - 1)
        if not np.all(self._support[idx] == vals):
            raise ValueError("theta value outside the toy support")
        return idx

    def sample_prior(self, rng, n):
        idx = rng.choice(self.n_atoms, size=n, p=self._prior)
        return self._support[idx][:, None]

    def supports_perturbation(self) -> bool:
        return True

    def sample_perturbed(self, rng, n, spec):
        masses = np.asarray(spec, dtype=np.float64)
        if masses.shape != self._prior.shape or abs(masses.sum() - 1.0) > 1e-9:
            raise ValueError("perturbed toy prior must give one mass per atom")
        idx = rng.choice(self.n_atoms, size=n, p=masses)
        return self._support[idx][:, None]

    # --- channel ------------------------------------------------------------
    def bump(self, design):
        xi = np.asarray(design, dtype=np.float64)[..., 0]
        return np.exp(-0.5 * ((xi - self.peak) / self.width) ** 2)

    def success_prob(self, theta, design):
        idx = self.theta_index(theta)
        g = self.bump(design)
        return self._base[idx] + self._gain[idx] * g

    def likelihood_table(self, design) -> np.ndarray:
        """Rows per atom, columns (p(y=0), p(y=1)); rows sum to 1."""
        g = self.bump(np.asarray(design, dtype=np.float64).reshape(-1))
        p1 = self._base + self._gain * float(g)
        return np.stack([1.0 - p1, p1], axis=-1)

    def log_likelihood(self, theta, design, outcome):
        p1 = self.success_prob(theta, design)
        y = np.asarray(outcome, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return np.where(
                np.broadcast_to(y, p1.shape) == 1.0, np.log(p1), np.log1p(-p1)
            )

    def loglik_design_grad(self, theta, design, outcome):
        idx = self.theta_index(theta)
        xi = np.asarray(design, dtype=np.float64)[..., 0]
        g = self.bump(design)
        p1 = self._base[idx] + self._gain[idx] * g
        y = np.broadcast_to(np.asarray(outcome, dtype=np.float64), p1.shape)
        with np.errstate(divide="ignore"):
            ll = np.where(y == 1.0, np.log(p1), np.log1p(-p1))
        dp = self._gain[idx] * g * (-(xi - self.peak) / self.width**2)
        denom = np.where(y == 1.0, p1, p1 - 1.0)  # d log p(y)/d p1
        safe = (p1 > 0.0) & (p1 < 1.0)
        grad = np.where(safe, dp / np.where(safe, denom, 1.0), 0.0)
        return ll, grad[..., None]

    def sample_outcome(self, theta, design, rng):
        p1 = self.success_prob(theta, design)
        y = (rng.random(p1.shape) < p1).astype(np.float64)
        return y, None

    def outcome_support_text(self) -> str:
        return "0 or 1"

    def validate_outcome(self, value: float) -> float:
        v = float(value)
        if v not in (0.0, 1.0):
            raise OutcomeSupportError(
                f"outcome must be {self.outcome_support_text()}, got {value!r}"
            )
        return v


TOY_PRESETS: dict[str, dict] = {
    "binary": {},
    "flat": {"p_base": (0.3, 0.3)},
    "deterministic": {"p_base": (0.0, 1.0)},
    "peaked": {
        "p_base": (0.5, 0.5),
        "p_gain": (-0.4, 0.4),
        "peak": 1.0,
        "width": 1.0,
    },
}


def toy_preset(variant: str, **overrides) -> ToyModel:
    if variant not in TOY_PRESETS:
        raise ValueError(f"unknown toy preset {variant!r}; have {sorted(TOY_PRESETS)}")
    kwargs = dict(TOY_PRESETS[variant])
    kwargs.update(overrides)
    return ToyModel(**kwargs)


# ---------------------------------------------------------------------------
# exact enumeration


@dataclass
class ToyJointTable:
    """Exact joint p(theta, h_T) over every outcome sequence of length T.

    Designs are frozen per history node during the tree walk, so stochastic
    proposers yield one fixed design tree (the identities being checked hold
    for any deterministic tree).
    """

    support: np.ndarray  # (M,)
    prior: np.ndarray  # (M,)
    outcomes: np.ndarray  # (H, T) in {0,1}
    designs: np.ndarray  # (H, T, design_dim)
    step_probs: np.ndarray  # (H, T, M): p(y_t observed | theta_m)

    @property
    def horizon(self) -> int:
        return self.outcomes.shape[1]

    def likelihoods(self, t_from: int = 0, t_to: Optional[int] = None) -> np.ndarray:
        """(H, M) product of step probabilities over steps [t_from, t_to)."""
        t_to = self.horizon if t_to is None else t_to
        if t_from == t_to:
            return np.ones((self.outcomes.shape[0], self.prior.size))
        return self.step_probs[:, t_from:t_to, :].prod(axis=1)

    def joint(self) -> np.ndarray:
        return self.prior * self.likelihoods()


def toy_enumerate(
    model: ToyModel,
    propose_fn: Callable[[History], np.ndarray],
    horizon: int,
    prefix: Optional[History] = None,
) -> ToyJointTable:
    """Walk the full outcome tree, recording designs and per-step likelihoods.

    ``propose_fn`` maps a history to a raw design and is called once per tree
    node in depth-first order. The prefix (if any) is fixed observed data; the
    enumeration covers steps len(prefix)..horizon.
    """
    prefix = prefix or History()
    tau = len(prefix)
    steps = horizon - tau
    if steps < 0:
        raise ValueError("prefix longer than horizon")
    n_cells = (2**steps) * model.n_atoms
    if n_cells > MAX_TABLE_CELLS:
        raise ValueError(f"enumeration table too large ({n_cells} cells)")

    rows_outcomes: list[list[int]] = []
    rows_designs: list[list[np.ndarray]] = []
    rows_probs: list[list[np.ndarray]] = []

    def walk(history: History, outcomes, designs, probs):
        if len(history) == horizon:
            rows_outcomes.append(list(outcomes))
            rows_designs.append(list(designs))
            rows_probs.append(list(probs))
            return
        raw = np.asarray(propose_fn(history), dtype=np.float64).reshape(-1)
        design = model.constrain_design(raw)
        table = model.likelihood_table(design)  # (M, 2)
        for y in (0, 1):
            h2 = history.copy()
            h2.append(design, float(y))
            walk(h2, outcomes + [y], designs + [design], probs + [table[:, y]])

    walk(prefix.copy(), [], [], [])
    table = ToyJointTable(
        support=model._support.copy(),
        prior=model._prior.copy(),
        outcomes=np.asarray(rows_outcomes, dtype=np.int64).reshape(2**steps, steps),
        designs=np.asarray(rows_designs, dtype=np.float64).reshape(
            2**steps, steps, model.design_dim
        ),
        step_probs=np.asarray(rows_probs, dtype=np.float64).reshape(
            2**steps, steps, model.n_atoms
        ),
    )
    total = table.joint().sum()
    if abs(total - 1.0) > 1e-12:
        raise AssertionError(f"joint table sums to {total!r}, expected 1")
    return table


def exact_eig_from_table(
    table: ToyJointTable, masses: Optional[np.ndarray] = None
) -> float:
    """Mutual information between theta and the enumerated histories.

    ``masses`` overrides the prior (posterior or perturbed weights).
    """
    w = table.prior if masses is None else np.asarray(masses, dtype=np.float64)
    lik = table.likelihoods()  # (H, M)
    marg = lik @ w
    joint = w * lik
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(joint > 0, np.log(lik) - np.log(marg)[:, None], 0.0)
    return float((joint * ratio).sum())
