"""Generative-model interface: prior over latents, design transform, outcome
likelihood with design derivatives, and reparameterized sampling where the
outcome distribution allows it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CONTINUOUS_LOG_INTENSITY = "continuous-log-intensity"
BINARY_CHOICE = "binary-choice"
CENSORED_SLIDER = "censored-slider"


class OutcomeSupportError(ValueError):
    """Submitted outcome lies outside the model's outcome support."""


@dataclass
class History:
    """Ordered (design, outcome) pairs; append-only, designs in constrained units."""

    designs: list[np.ndarray] = field(default_factory=list)
    outcomes: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.designs)

    def append(self, design: np.ndarray, outcome: float) -> None:
        self.designs.append(np.asarray(design, dtype=np.float64).reshape(-1))
        self.outcomes.append(float(outcome))

    def design_matrix(self, width: int) -> np.ndarray:
        if not self.designs:
            return np.zeros((0, width))
        return np.stack(self.designs)

    def outcome_vector(self) -> np.ndarray:
        return np.asarray(self.outcomes, dtype=np.float64)

    def copy(self) -> "History":
        return History(list(self.designs), list(self.outcomes))


class Model:
    """Base class; subclasses fill in the model-specific pieces.

    Array contracts: ``theta`` has trailing axis ``theta_dim``, ``design``
    trailing axis ``design_dim``, ``outcome`` is scalar per leading index.
    Leading axes broadcast against each other.
    """

    name: str = "base"
    theta_dim: int = 0
    design_dim: int = 0
    outcome_kind: str = ""
    theta_labels: tuple[str, ...] = ()
    design_labels: tuple[str, ...] = ()
    reparameterizable: bool = False

    @property
    def raw_design_dim(self) -> int:
        return self.design_dim

    # --- prior ------------------------------------------------------------
    def sample_prior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def supports_perturbation(self) -> bool:
        return False

    def sample_perturbed(self, rng: np.random.Generator, n: int, spec) -> np.ndarray:
        raise NotImplementedError(f"{self.name} has no perturbed-prior form")

    # --- design transform ---------------------------------------------------
    def constrain_design(self, raw: np.ndarray) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64)

    def unconstrain_design(self, design: np.ndarray) -> np.ndarray:
        return np.asarray(design, dtype=np.float64)

    def constrain_grad(self, raw: np.ndarray) -> np.ndarray:
        """Diagonal Jacobian d(constrained)/d(raw), same shape as raw."""
        return np.ones_like(np.asarray(raw, dtype=np.float64))

    # --- likelihood ---------------------------------------------------------
    def log_likelihood(self, theta, design, outcome) -> np.ndarray:
        raise NotImplementedError

    def loglik_design_grad(self, theta, design, outcome):
        """Returns (loglik, d loglik / d design) with design axis appended."""
        raise NotImplementedError

    def loglik_outcome_grad(self, theta, design, outcome) -> np.ndarray:
        """d loglik / d outcome at fixed design (pathwise mode only)."""
        raise NotImplementedError

    # --- sampling -----------------------------------------------------------
    def sample_outcome(self, theta, design, rng: np.random.Generator):
        """Draw outcomes; returns (outcome, innovation-or-None)."""
        raise NotImplementedError

    def outcome_from_innovation(self, theta, design, z):
        """Deterministic outcome for fixed innovation; returns (y, dy/d design)."""
        raise NotImplementedError

    # --- validation / display -------------------------------------------------
    def outcome_support_text(self) -> str:
        return "a finite real number"

    def validate_outcome(self, value: float) -> float:
        v = float(value)
        if not np.isfinite(v):
            raise OutcomeSupportError(
                f"outcome must be {self.outcome_support_text()}, got {value!r}"
            )
        return v

    def design_payload(self, design: np.ndarray) -> dict:
        return {
            label: float(v) for label, v in zip(self.design_labels, np.ravel(design))
        }

    def random_raw_scale(self) -> float:
        """Spread of the default random-design baseline in raw design space."""
        return 1.0
