"""End-to-end training and deployment: offline policy training, the online
infer-refine loop over a refinement schedule, and the static / step-static /
random baselines.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import gradcore as gc
from .bounds import (
    FixedDesignProposer,
    NetworkProposer,
    Proposer,
    RandomProposer,
    TabularProposer,
    ThetaSource,
    as_proposer,
    spce_gradient,
)
from .inference import ParticlePosterior, fit_posterior_is
from .models.base import History, Model
from .policy import PolicyNetwork
from .seeding import rng_stream

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss stayed non-finite for the configured number of consecutive steps."""


@dataclass
class TrainConfig:
    batch: int = 128
    contrasts: int = 127
    steps: int = 1000
    lr: float = 1e-4
    decay_factor: Optional[float] = None
    decay_period: Optional[int] = None
    grad_mode: str = "auto"
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    divergence_patience: int = 10
    freeze_encoder: bool = False
    particles: int = 2000  # posterior particle count for refinement stages
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.batch < 1 or self.contrasts < 1 or self.steps < 0 or self.lr <= 0:
            raise ValueError("train config values out of range")
        if self.decay_factor is not None and not 0 < self.decay_factor <= 1:
            raise ValueError("decay factor must lie in (0, 1]")


@dataclass
class RefinementSchedule:
    """Interior refinement steps 0 < tau_1 < ... < tau_K < horizon with
    per-stage gradient-step budgets."""

    horizon: int
    taus: list[int] = field(default_factory=list)
    budgets: list[int] = field(default_factory=list)

    def __post_init__(self):
        taus = list(self.taus)
        if taus != sorted(set(taus)):
            raise ValueError("refinement steps must be strictly increasing")
        if taus and (taus[0] <= 0 or taus[-1] >= self.horizon):
            raise ValueError("refinement steps must satisfy 0 < tau < horizon")
        if len(self.budgets) != len(taus):
            raise ValueError("one training budget per refinement step required")
        if any(b < 0 for b in self.budgets):
            raise ValueError("budgets must be nonnegative")

    @property
    def stage_bounds(self) -> list[tuple[int, int]]:
        marks = [0, *self.taus, self.horizon]
        return list(zip(marks[:-1], marks[1:]))


@dataclass
class TraceRow:
    step: int
    value: float
    lr: float
    applied: bool


@dataclass
class TrainResult:
    proposer: Proposer
    trace: list[TraceRow]
    diverged: bool = False
    snapshots: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)


def _frozen_names(params: dict[str, np.ndarray]) -> set[str]:
    prefixes = ("encoder.", "embed_design.", "embed_outcome.", "head_on.", "head_off.")
    return {k for k in params if k.startswith(prefixes)}


def _train_loop(
    model: Model,
    proposer: Proposer,
    get_params: Callable[[], dict],
    set_params: Callable[[dict], None],
    config: TrainConfig,
    rng: np.random.Generator,
    horizon: int,
    prefix: Optional[History],
    theta_source: Optional[ThetaSource],
    snapshot_steps: Optional[list[int]] = None,
    on_checkpoint: Optional[Callable[[int, dict], None]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    prefix = prefix or History()
    source = theta_source or ThetaSource.prior(model)
    params = get_params()
    frozen = _frozen_names(params) if config.freeze_encoder else set()
    state = gc.adam_init(
        params, config.lr, beta1=config.beta1, beta2=config.beta2,
        decay_factor=config.decay_factor, decay_period=config.decay_period,
    )
    snapshots: dict[int, dict] = {}
    want_snaps = sorted(set(snapshot_steps or []))
    if 0 in want_snaps:
        snapshots[0] = {k: v.copy() for k, v in params.items()}
    trace: list[TraceRow] = []
    last_good = {k: v.copy() for k, v in params.items()}
    bad_streak = 0
    for step in range(config.steps):
        applied = True
        grads, estimate = spce_gradient(
            model, proposer, source, prefix, horizon,
            config.contrasts, config.batch, rng, grad_mode=config.grad_mode,
        )
        if not np.isfinite(estimate.value):
            bad_streak += 1
            applied = False
            if bad_streak >= config.divergence_patience:
                set_params(last_good)
                logger.error("training diverged at step %d; restored last good params", step)
                return TrainResult(proposer, trace, diverged=True, snapshots=snapshots)
        else:
            bad_streak = 0
            for name in frozen:
                grads[name] = np.zeros_like(grads[name])
            try:
                # ascent: descend on the negated gradient
                state, params = gc.adam_step(state, params, {k: -g for k, g in grads.items()})
                set_params(params)
                last_good = params
            except gc.NonFiniteGradientError as err:
                logger.warning("step %d rejected: %s", step, err)
                applied = False
        trace.append(TraceRow(step, estimate.value, gc.adam_effective_lr(state), applied))
        if on_step is not None:
            on_step(step, estimate.value)
        done = step + 1
        if done in want_snaps:
            snapshots[done] = {k: v.copy() for k, v in params.items()}
        if config.checkpoint_every and on_checkpoint and done % config.checkpoint_every == 0:
            on_checkpoint(done, params)
    return TrainResult(proposer, trace, diverged=False, snapshots=snapshots)


def train_policy(
    model: Model,
    policy: PolicyNetwork,
    config: TrainConfig,
    rng: np.random.Generator,
    horizon: int,
    prefix: Optional[History] = None,
    theta_source: Optional[ThetaSource] = None,
    snapshot_steps: Optional[list[int]] = None,
    on_checkpoint: Optional[Callable[[int, dict], None]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Stochastic gradient ascent of the contrastive lower bound over policy
    parameters. With an empty prefix and the prior source this is offline
    amortized training; with a particle source and fixed prefix it is
    mid-experiment refinement."""
    proposer = NetworkProposer(policy)
    result = _train_loop(
        model, proposer, policy.to_dict, policy.load_dict, config, rng,
        horizon, prefix, theta_source, snapshot_steps, on_checkpoint, on_step,
    )
    policy.train_steps += sum(1 for row in result.trace if row.applied)
    return result


def refine_policy(
    model: Model,
    policy: PolicyNetwork,
    posterior: ParticlePosterior,
    prefix: History,
    horizon: int,
    config: TrainConfig,
    rng: np.random.Generator,
    snapshot_steps: Optional[list[int]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> tuple[PolicyNetwork, TrainResult]:
    """Warm-started fine-tuning of a copy of ``policy`` on the conditional
    bound with latents resampled from the posterior each gradient step.
    Zero steps returns the incoming policy untouched."""
    if posterior is None or posterior.n == 0:
        raise ValueError("refinement needs a non-empty posterior")
    if len(prefix) != posterior.history_len:
        raise ValueError("posterior was fitted for a different prefix length")
    if len(prefix) >= horizon:
        raise ValueError("nothing left to refine: prefix reaches the horizon")
    if config.steps == 0:
        return policy, TrainResult(NetworkProposer(policy), [])
    tuned = policy.clone()
    result = train_policy(
        model, tuned, config, rng, horizon,
        prefix=prefix, theta_source=ThetaSource.particles(posterior),
        snapshot_steps=snapshot_steps, on_step=on_step,
    )
    tuned.refined_at = len(prefix)
    return tuned, result


# ---------------------------------------------------------------------------
# environments


class SimulatedEnvironment:
    """Outcomes drawn from the model at a hidden latent value."""

    def __init__(self, model: Model, theta_star: np.ndarray, rng: np.random.Generator):
        self.model = model
        self.theta_star = np.asarray(theta_star, dtype=np.float64).reshape(-1)
        self.rng = rng

    @classmethod
    def from_source(cls, model: Model, source: ThetaSource, seed: int) -> "SimulatedEnvironment":
        theta = source.draw(rng_stream(seed, "theta-star"), 1)[0]
        return cls(model, theta, rng_stream(seed, "environment"))

    def observe(self, design: np.ndarray) -> float:
        y, _ = self.model.sample_outcome(self.theta_star, np.asarray(design, dtype=np.float64), self.rng)
        return float(y)


class CallbackEnvironment:
    """Outcomes supplied externally (terminal prompt or HTTP session)."""

    def __init__(self, model: Model, callback: Callable[[np.ndarray, int], float]):
        self.model = model
        self.callback = callback
        self._t = 0

    def observe(self, design: np.ndarray) -> float:
        value = self.callback(design, self._t)
        self._t += 1
        return self.model.validate_outcome(value)


# ---------------------------------------------------------------------------
# the online loop


@dataclass
class StageTiming:
    tau: int
    design_seconds: float = 0.0
    inference_seconds: float = 0.0
    refine_seconds: float = 0.0

    @property
    def total_seconds(self) -> float:
        return self.design_seconds + self.inference_seconds + self.refine_seconds


@dataclass
class RunResult:
    history: History
    stage_policies: list[tuple[int, Proposer]]
    timings: list[StageTiming]
    posteriors: list[ParticlePosterior] = field(default_factory=list)


def run_experiment(
    model: Model,
    schedule: RefinementSchedule,
    policy0,
    refine_config: TrainConfig,
    environment,
    seed: int,
) -> RunResult:
    """Execute designs stage by stage; after each interior refinement step,
    fit the particle posterior and fine-tune the policy within its budget.
    A failed refinement falls back to the previous stage's policy."""
    proposer = as_proposer(policy0, model)
    history = History()
    stage_policies: list[tuple[int, Proposer]] = [(0, proposer)]
    timings: list[StageTiming] = []
    posteriors: list[ParticlePosterior] = []
    design_rng = rng_stream(seed, "design")
    for k, (start, stop) in enumerate(schedule.stage_bounds):
        timing = StageTiming(tau=start)
        t0 = time.perf_counter()
        for _ in range(start, stop):
            raw = proposer.propose_single(history, design_rng)
            design = model.constrain_design(np.asarray(raw, dtype=np.float64))
            outcome = environment.observe(design)
            history.append(design, outcome)
        timing.design_seconds = time.perf_counter() - t0
        if stop < schedule.horizon:
            budget = schedule.budgets[k]
            if budget > 0:
                t0 = time.perf_counter()
                posterior = fit_posterior_is(
                    model, history, refine_config.particles,
                    rng_stream(seed, "stage", k, "infer"),
                )
                posteriors.append(posterior)
                timing.inference_seconds = time.perf_counter() - t0
                t0 = time.perf_counter()
                try:
                    if not isinstance(proposer, NetworkProposer):
                        raise TrainingDiverged("only network policies can be refined")
                    stage_config = replace(refine_config, steps=budget)
                    tuned, result = refine_policy(
                        model, proposer.policy, posterior, history.copy(),
                        schedule.horizon, stage_config,
                        rng_stream(seed, "stage", k, "refine"),
                    )
                    if result.diverged:
                        logger.warning("stage %d refinement diverged; keeping previous policy", k)
                    else:
                        proposer = NetworkProposer(tuned)
                except TrainingDiverged as err:
                    logger.warning("stage %d refinement failed (%s); keeping previous policy", k, err)
                timing.refine_seconds = time.perf_counter() - t0
                stage_policies.append((stop, proposer))
        timings.append(timing)
    return RunResult(history, stage_policies, timings, posteriors)


# ---------------------------------------------------------------------------
# non-adaptive baselines


def train_static_designs(
    model: Model,
    horizon: int,
    config: TrainConfig,
    rng: np.random.Generator,
    prefix: Optional[History] = None,
    theta_source: Optional[ThetaSource] = None,
) -> tuple[np.ndarray, TrainResult]:
    """Optimize a fixed raw-design list under the non-adaptive contrastive
    bound. Designs start at zero (the center of each constrained range) so
    zero-budget runs are reproducible without consuming randomness."""
    prefix = prefix or History()
    n_designs = horizon - len(prefix)
    if n_designs <= 0:
        return np.zeros((0, model.raw_design_dim)), TrainResult(
            FixedDesignProposer(np.zeros((0, model.raw_design_dim))), []
        )
    proposer = TabularProposer(
        np.zeros((n_designs, model.raw_design_dim)), offset=len(prefix)
    )
    result = _train_loop(
        model, proposer, proposer.params, proposer.load, config, rng,
        horizon, prefix, theta_source,
    )
    return proposer.raw_designs.copy(), result


def step_static(
    model: Model,
    tau: int,
    horizon: int,
    config: TrainConfig,
    seed: int,
    observe_fn: Callable[[np.ndarray, int], float],
) -> tuple[np.ndarray, np.ndarray, History]:
    """Two-stage fixed designs: optimize the first tau designs, run them
    through ``observe_fn``, fit the posterior, then optimize the remaining
    designs against it."""
    prefix_raw, _ = train_static_designs(
        model, tau, config, rng_stream(seed, "static", "prefix")
    )
    history = History()
    for t in range(tau):
        design = model.constrain_design(prefix_raw[t])
        history.append(design, model.validate_outcome(observe_fn(design, t)))
    if tau < horizon:
        posterior = fit_posterior_is(
            model, history, config.particles, rng_stream(seed, "static", "infer")
        )
        suffix_raw, _ = train_static_designs(
            model, horizon, config, rng_stream(seed, "static", "suffix"),
            prefix=history, theta_source=ThetaSource.particles(posterior),
        )
    else:
        suffix_raw = np.zeros((0, model.raw_design_dim))
    return prefix_raw, suffix_raw, history


def random_policy(model: Model, scale: Optional[float] = None) -> RandomProposer:
    """History-independent designs drawn i.i.d. from the declared raw-space
    normal distribution."""
    return RandomProposer(model, scale)
