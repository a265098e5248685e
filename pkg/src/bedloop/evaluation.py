"""Evaluation harness: paired lower/upper total-EIG estimates, the
conservative refinement-gain estimator (lower bound on the refined policy
minus upper bound on the frozen policy, per shared history), robustness
sweeps under perturbed test-time priors, exact enumeration oracles, and the
total-EIG decomposition check.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .bounds import (
    BoundEstimate,
    NetworkProposer,
    Proposer,
    ThetaSource,
    as_proposer,
    paired_bounds,
    simulate_rollouts,
    snmc_integrand,
    spce_integrand,
)
from .inference import ParticlePosterior
from .models.base import History, Model
from .models.toy import ToyJointTable, ToyModel, toy_enumerate
from .orchestrate import TrainConfig, refine_policy
from .policy import PolicyNetwork
from .seeding import rng_stream

METHOD_CSV_HEADER = (
    "method", "shift", "lower", "lower_se", "upper", "upper_se", "n_histories", "contrasts", "seed"
)


@dataclass
class MethodRow:
    method: str
    lower: float
    lower_se: float
    upper: float
    upper_se: float
    n_histories: int
    contrasts: int
    seed: Optional[int] = None
    shift: Optional[float] = None

    def csv_row(self) -> list:
        return [
            self.method,
            "" if self.shift is None else repr(self.shift),
            repr(self.lower), repr(self.lower_se),
            repr(self.upper), repr(self.upper_se),
            self.n_histories, self.contrasts,
            "" if self.seed is None else self.seed,
        ]


def write_method_csv(path, rows: Sequence[MethodRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METHOD_CSV_HEADER)
        for row in rows:
            writer.writerow(row.csv_row())
    return path


def render_table(rows: Sequence[MethodRow]) -> str:
    lines = [f"{'Method':<22}{'Lower bound':>20}{'Upper bound':>20}"]
    for r in rows:
        shift = f" (shift {r.shift:g})" if r.shift is not None else ""
        lines.append(
            f"{r.method + shift:<22}"
            f"{r.lower:>12.3f} ± {r.lower_se:<5.3f}"
            f"{r.upper:>12.3f} ± {r.upper_se:<5.3f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# total EIG


def estimate_total_eig(
    model: Model,
    policy_or_designs,
    contrasts: int,
    n_rollouts: int,
    rng,
    theta_source: Optional[ThetaSource] = None,
    exact: bool = False,
    seed: Optional[int] = None,
    horizon: Optional[int] = None,
) -> tuple[BoundEstimate, BoundEstimate, float]:
    """Paired lower/upper total-EIG estimates sharing rollouts."""
    if horizon is None:
        raise ValueError("horizon required")
    source = theta_source or ThetaSource.prior(model)
    return paired_bounds(
        model, policy_or_designs, source, None, horizon,
        contrasts, n_rollouts, rng, exact=exact, seed=seed,
    )


def bound_family(
    model: Model,
    policy_or_designs,
    contrast_grid: Sequence[int],
    n_rollouts: int,
    rng,
    horizon: int,
    theta_source: Optional[ThetaSource] = None,
    prefix: Optional[History] = None,
):
    """Lower/upper estimates over several contrast counts with shared rollouts
    and nested contrast sets, so orderings can be tested on paired values.

    Returns {L: (lower est, upper est, lower values, upper values)}.
    """
    source = theta_source or ThetaSource.prior(model)
    prefix = prefix or History()
    l_max = max(contrast_grid)
    thetas = source.draw(rng, n_rollouts * (l_max + 1)).reshape(n_rollouts, l_max + 1, -1)
    proposer = as_proposer(policy_or_designs, model)
    rec = simulate_rollouts(model, proposer, thetas, prefix, horizon, rng)
    out = {}
    for l_sub in contrast_grid:
        ll = rec.loglik[:, : l_sub + 1]
        lo_vals = spce_integrand(ll)
        hi_vals = snmc_integrand(ll)
        lo = BoundEstimate(
            "sPCE", float(lo_vals.mean()), float(lo_vals.std(ddof=1) / np.sqrt(n_rollouts)),
            n_rollouts, l_sub, len(prefix), source.tag,
        )
        hi = BoundEstimate(
            "sNMC", float(hi_vals.mean()), float(hi_vals.std(ddof=1) / np.sqrt(n_rollouts)),
            n_rollouts, l_sub, len(prefix), source.tag,
        )
        out[l_sub] = (lo, hi, lo_vals, hi_vals)
    return out


# ---------------------------------------------------------------------------
# particles from an arbitrary theta source


def fit_particles_from_source(
    model: Model, source: ThetaSource, history: History, n: int, rng
) -> ParticlePosterior:
    """Self-normalized importance weights for proposal draws from ``source``."""
    thetas = source.draw(rng, n)
    logw = np.zeros(n)
    designs = history.design_matrix(model.design_dim)
    outcomes = history.outcome_vector()
    for t in range(len(history)):
        logw += model.log_likelihood(thetas, designs[t], outcomes[t])
    if not np.any(np.isfinite(logw)):
        raise RuntimeError("history impossible under every proposal particle")
    logw = logw - logsumexp(logw)
    return ParticlePosterior(thetas=thetas, log_weights=logw, history_len=len(history))


# ---------------------------------------------------------------------------
# conservative refinement gain


@dataclass
class DeltaEigResult:
    tau: int
    horizon: int
    contrasts: int
    deltas: dict[int, np.ndarray]  # refinement budget -> per-history deltas
    refined_lower: dict[int, np.ndarray]  # per-history suffix lower bounds
    base_lower: BoundEstimate
    base_upper: BoundEstimate
    prefix_lower: BoundEstimate
    prefix_upper: BoundEstimate
    ess: list[float] = field(default_factory=list)

    def delta_mean(self, budget: Optional[int] = None) -> float:
        return float(self._pick(budget).mean())

    def delta_se(self, budget: Optional[int] = None) -> float:
        d = self._pick(budget)
        return float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0

    def _pick(self, budget: Optional[int]) -> np.ndarray:
        if budget is None:
            budget = max(self.deltas)
        return self.deltas[budget]

    def step_bounds(self, budget: Optional[int] = None) -> tuple[float, float, float]:
        """(lower, upper, se) for the refined strategy: frozen-policy total
        bounds plus the conservative per-history gain."""
        dm = self.delta_mean(budget)
        se = float(np.sqrt(self.delta_se(budget) ** 2 + self.base_lower.se**2))
        return self.base_lower.value + dm, self.base_upper.value + dm, se

    def direct_total(self, budget: Optional[int] = None) -> tuple[float, float]:
        """Higher-variance alternative: prefix lower bound plus the mean
        suffix lower bound of the refined policy (no upper-bound pairing)."""
        if budget is None:
            budget = max(self.refined_lower)
        suffix = self.refined_lower[budget]
        se = float(np.sqrt(
            (suffix.std(ddof=1) / np.sqrt(suffix.size)) ** 2 + self.prefix_lower.se**2
        )) if suffix.size > 1 else self.prefix_lower.se
        return self.prefix_lower.value + float(suffix.mean()), se


def estimate_delta_eig(
    model: Model,
    policy0: PolicyNetwork,
    tau: int,
    horizon: int,
    refine_config: TrainConfig,
    n_histories: int,
    contrasts: int,
    n_eval: int,
    seed: int,
    history_source: Optional[ThetaSource] = None,
    refine_source: Optional[ThetaSource] = None,
    eval_source: Optional[ThetaSource] = None,
    budget_grid: Optional[Sequence[int]] = None,
    exact: bool = False,
) -> DeltaEigResult:
    """Per sampled prefix history: refine a copy of the policy, then score
    lower(refined) - upper(frozen) on the remaining steps with latents drawn
    from the particle posterior. The average gain is added to the frozen
    policy's total bounds (gains are under-, never over-stated).

    ``history_source`` generates the hidden latent for prefix rollouts
    (perturbed at test time in robustness sweeps); ``refine_source`` is the
    experimenter's proposal for posterior fitting (the model prior by
    default); ``eval_source`` is the metric's proposal (equals
    ``history_source`` under perturbation).
    """
    history_source = history_source or ThetaSource.prior(model)
    refine_source = refine_source or ThetaSource.prior(model)
    eval_source = eval_source or history_source
    budgets = sorted(set(budget_grid or [refine_config.steps]))
    base = NetworkProposer(policy0)

    base_lower, base_upper, _ = paired_bounds(
        model, base, history_source, None, horizon, contrasts, n_eval,
        rng_stream(seed, "delta", "total"), exact=exact, seed=seed,
    )
    prefix_lower, prefix_upper, _ = paired_bounds(
        model, base, history_source, None, tau, contrasts, n_eval,
        rng_stream(seed, "delta", "prefix"), exact=exact, seed=seed,
    )

    deltas = {b: np.zeros(n_histories) for b in budgets}
    refined_lower = {b: np.zeros(n_histories) for b in budgets}
    ess_list: list[float] = []
    for h in range(n_histories):
        theta_star = history_source.draw(rng_stream(seed, "delta", h, "star"), 1)[0]
        env_rng = rng_stream(seed, "delta", h, "env")
        prefix = History()
        for _ in range(tau):
            raw = base.propose_single(prefix)
            design = model.constrain_design(raw)
            y, _ = model.sample_outcome(theta_star, design, env_rng)
            prefix.append(design, float(y))

        post_refine = fit_particles_from_source(
            model, refine_source, prefix, refine_config.particles,
            rng_stream(seed, "delta", h, "infer"),
        )
        ess_list.append(post_refine.ess)
        tuned_cfg = replace(refine_config, steps=max(budgets))
        snapshots = None
        if max(budgets) > 0:
            tuned, result = refine_policy(
                model, policy0, post_refine, prefix, horizon, tuned_cfg,
                rng_stream(seed, "delta", h, "refine"), snapshot_steps=budgets,
            )
            snapshots = result.snapshots

        same_source = eval_source.tag == refine_source.tag and eval_source.spec is refine_source.spec
        if same_source:
            post_eval = post_refine
        else:
            post_eval = fit_particles_from_source(
                model, eval_source, prefix, refine_config.particles,
                rng_stream(seed, "delta", h, "eval-infer"),
            )
        eval_particles = ThetaSource.particles(post_eval)

        if exact:
            if not isinstance(model, ToyModel):
                raise ValueError("exact mode needs the toy model")
            masses = eval_particles.atom_masses(model)
            upper0 = _exact_conditional(model, base, prefix, horizon, masses)
            for b in budgets:
                cand = _policy_at(policy0, snapshots, b)
                lower_s = _exact_conditional(model, NetworkProposer(cand), prefix, horizon, masses)
                deltas[b][h] = lower_s - upper0
                refined_lower[b][h] = lower_s
            continue

        eval_rng0 = rng_stream(seed, "delta", h, "eval-base")
        thetas = eval_particles.draw(
            rng_stream(seed, "delta", h, "eval-thetas"), n_eval * (contrasts + 1)
        ).reshape(n_eval, contrasts + 1, -1)
        rec0 = simulate_rollouts(model, base, thetas, prefix, horizon, eval_rng0)
        upper0 = float(snmc_integrand(rec0.loglik).mean())
        for b in budgets:
            cand = _policy_at(policy0, snapshots, b)
            # same stream per history for every budget: common random numbers
            rec_s = simulate_rollouts(
                model, NetworkProposer(cand), thetas, prefix, horizon,
                rng_stream(seed, "delta", h, "eval-refined"),
            )
            refined_lower[b][h] = float(spce_integrand(rec_s.loglik).mean())
            deltas[b][h] = refined_lower[b][h] - upper0

    return DeltaEigResult(
        tau=tau, horizon=horizon, contrasts=contrasts, deltas=deltas,
        refined_lower=refined_lower,
        base_lower=base_lower, base_upper=base_upper,
        prefix_lower=prefix_lower, prefix_upper=prefix_upper, ess=ess_list,
    )


def _policy_at(policy0: PolicyNetwork, snapshots, budget: int) -> PolicyNetwork:
    if budget == 0 or snapshots is None:
        return policy0
    cand = policy0.clone()
    cand.load_dict(snapshots[budget])
    return cand


def _exact_conditional(model: ToyModel, proposer: Proposer, prefix, horizon, masses) -> float:
    from .models.toy import exact_eig_from_table

    table = toy_enumerate(model, lambda h: proposer.propose_single(h), horizon, prefix=prefix)
    return exact_eig_from_table(table, masses)


def write_delta_csv(path, result: DeltaEigResult) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "budget", "delta", "delta_se", "step_lower", "step_upper", "direct_total"])
        for budget in sorted(result.deltas):
            lo, hi, _ = result.step_bounds(budget)
            direct, _ = result.direct_total(budget)
            writer.writerow([
                result.tau, budget,
                repr(result.delta_mean(budget)), repr(result.delta_se(budget)),
                repr(lo), repr(hi), repr(direct),
            ])
    return path


# ---------------------------------------------------------------------------
# robustness under perturbed test-time priors


@dataclass
class SweepMethod:
    name: str
    proposer: Optional[Proposer] = None  # fixed-policy evaluation
    policy: Optional[PolicyNetwork] = None  # refinement evaluation
    tau: int = 0
    refine_config: Optional[TrainConfig] = None
    n_histories: int = 16


def robustness_sweep(
    model: Model,
    methods: Sequence[SweepMethod],
    shifts: Sequence,
    horizon: int,
    contrasts: int,
    n_rollouts: int,
    seed: int,
    exact: bool = False,
) -> list[MethodRow]:
    """Total-EIG bounds when the data-generating latents come from a
    perturbed prior; fixed policies are scored directly, refinement methods
    through the conservative composition (posterior fitting still uses the
    training prior: the experimenter does not know the perturbation)."""
    rows: list[MethodRow] = []
    for spec in shifts:
        shift_label = float(spec) if np.isscalar(spec) else float("nan")
        source = ThetaSource.perturbed(model, spec)
        for method in methods:
            if method.proposer is not None:
                lo, hi, _ = paired_bounds(
                    model, method.proposer, source, None, horizon, contrasts,
                    n_rollouts, rng_stream(seed, "sweep", method.name, str(spec)),
                    exact=exact, seed=seed,
                )
                rows.append(MethodRow(
                    method.name, lo.value, lo.se, hi.value, hi.se,
                    n_rollouts, contrasts, seed, shift_label,
                ))
            else:
                result = estimate_delta_eig(
                    model, method.policy, method.tau, horizon,
                    method.refine_config, method.n_histories, contrasts,
                    n_rollouts, int(rng_stream(seed, "sweep-seed", method.name, str(spec)).integers(2**31)),
                    history_source=source, eval_source=source, exact=exact,
                )
                lo, hi, se = result.step_bounds()
                rows.append(MethodRow(
                    method.name, lo, se, hi, se,
                    method.n_histories, contrasts, seed, shift_label,
                ))
    return rows


# ---------------------------------------------------------------------------
# exact decomposition oracle


@dataclass
class DecompositionResult:
    total: float
    prefix: float
    expected_remaining: float

    @property
    def residual(self) -> float:
        return abs(self.total - self.prefix - self.expected_remaining)


def _table_mutual_info(lik: np.ndarray, masses: np.ndarray) -> float:
    marg = lik @ masses
    joint = masses * lik
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(joint > 0, np.log(lik) - np.log(marg)[:, None], 0.0)
    return float((joint * ratio).sum())


def decomposition_terms(table: ToyJointTable, tau: int) -> DecompositionResult:
    horizon = table.horizon
    if not 0 <= tau <= horizon:
        raise ValueError("tau must lie in [0, horizon]")
    total = _table_mutual_info(table.likelihoods(), table.prior)
    n_suffix = 2 ** (horizon - tau)
    prefix_rows = np.arange(0, table.outcomes.shape[0], n_suffix)
    prefix_lik = table.likelihoods(0, tau)[prefix_rows]
    prefix_term = _table_mutual_info(prefix_lik, table.prior)
    suffix_lik = table.likelihoods(tau, horizon)
    expected = 0.0
    for block, row0 in enumerate(prefix_rows):
        plik = prefix_lik[block]
        weight = float(table.prior @ plik)
        if weight == 0.0:
            continue
        post = table.prior * plik / weight
        slik = suffix_lik[row0 : row0 + n_suffix]
        expected += weight * _table_mutual_info(slik, post)
    return DecompositionResult(total=total, prefix=prefix_term, expected_remaining=expected)


def decomposition_check(
    model: ToyModel,
    policy_or_designs,
    tau: int,
    horizon: int,
    rng=None,
) -> DecompositionResult:
    """Exact check of total = prefix + E[remaining] on the enumerable model.

    Stochastic proposers are frozen into one design tree during enumeration;
    the identity holds for any fixed tree.
    """
    proposer = as_proposer(policy_or_designs, model)
    table = toy_enumerate(model, lambda h: proposer.propose_single(h, rng), horizon)
    return decomposition_terms(table, tau)


# ---------------------------------------------------------------------------
# refinement-budget ablation


@dataclass
class AblationRow:
    budget: int
    step_lower: float
    step_lower_se: float
    per_seed: list[float]

    def csv_row(self) -> list:
        return [self.budget, repr(self.step_lower), repr(self.step_lower_se)] + [
            repr(v) for v in self.per_seed
        ]


def budget_ablation(
    model: Model,
    policy0: PolicyNetwork,
    tau: int,
    horizon: int,
    refine_config: TrainConfig,
    budget_grid: Sequence[int],
    n_histories: int,
    contrasts: int,
    n_eval: int,
    seeds: Sequence[int],
) -> list[AblationRow]:
    """Conservative lower bound of the refined strategy as a function of the
    per-stage refinement budget, seed-averaged. One refinement run per
    history serves every budget via parameter snapshots."""
    grid = sorted(set(int(b) for b in budget_grid))
    per_budget: dict[int, list[float]] = {b: [] for b in grid}
    for seed in seeds:
        result = estimate_delta_eig(
            model, policy0, tau, horizon, refine_config, n_histories,
            contrasts, n_eval, int(seed), budget_grid=grid,
        )
        for b in grid:
            per_budget[b].append(result.step_bounds(b)[0])
    rows = []
    for b in grid:
        vals = np.asarray(per_budget[b])
        se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        rows.append(AblationRow(b, float(vals.mean()), se, [float(v) for v in vals]))
    return rows


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        n_seeds = len(rows[0].per_seed) if rows else 0
        writer.writerow(["budget", "step_lower", "step_lower_se"] + [f"seed_{i}" for i in range(n_seeds)])
        for row in rows:
            writer.writerow(row.csv_row())
    return path
