"""Contrastive information-gain bounds and their gradient estimators.

The lower bound scores the data-generating latent against itself plus L
contrastive draws (denominator averages L+1 terms); the upper bound excludes
the data-generating draw (denominator averages L terms). Both share the same
batched autoregressive rollouts. Gradients propagate either path-wise through
reparameterized outcomes or by the score-function estimator with a
leave-one-out baseline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from . import gradcore as gc
from .inference import ParticlePosterior, resample
from .models.base import History, Model
from .models.toy import ToyModel, exact_eig_from_table, toy_enumerate
from .policy import PolicyNetwork, next_design

BOUND_CSV_HEADER = ("kind", "value", "se", "n_outer", "contrasts", "prefix_len", "theta_source", "seed")


@dataclass
class BoundEstimate:
    kind: str  # sPCE | sNMC | PCE
    value: float
    se: float
    n_outer: int
    contrasts: int
    prefix_len: int
    theta_source: str
    seed: Optional[int] = None

    def csv_row(self) -> list:
        return [
            self.kind, repr(self.value), repr(self.se), self.n_outer,
            self.contrasts, self.prefix_len, self.theta_source,
            "" if self.seed is None else self.seed,
        ]


def write_bounds_csv(path, estimates: Sequence[BoundEstimate]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BOUND_CSV_HEADER)
        for est in estimates:
            writer.writerow(est.csv_row())
    return path


# ---------------------------------------------------------------------------
# theta sources


class ThetaSource:
    """Where latent draws come from: the model prior, a particle posterior,
    or a perturbed test-time prior."""

    def __init__(self, tag: str, model: Optional[Model] = None,
                 posterior: Optional[ParticlePosterior] = None, spec=None):
        self.tag = tag
        self.model = model
        self.posterior = posterior
        self.spec = spec

    @classmethod
    def prior(cls, model: Model) -> "ThetaSource":
        return cls("prior", model=model)

    @classmethod
    def particles(cls, posterior: ParticlePosterior) -> "ThetaSource":
        if posterior is None or posterior.n == 0:
            raise ValueError("empty particle source")
        return cls("particles", posterior=posterior)

    @classmethod
    def perturbed(cls, model: Model, spec) -> "ThetaSource":
        if not model.supports_perturbation():
            raise ValueError(f"model {model.name} has no perturbed-prior form")
        return cls("perturbed", model=model, spec=spec)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.tag == "prior":
            return self.model.sample_prior(rng, n)
        if self.tag == "particles":
            return resample(self.posterior, n, rng)
        if self.tag == "perturbed":
            return self.model.sample_perturbed(rng, n, self.spec)
        raise ValueError(f"unknown theta source {self.tag!r}")

    def atom_masses(self, toy: ToyModel) -> np.ndarray:
        """Masses over the toy support (exact-expectation mode)."""
        if self.tag == "prior":
            return toy._prior.copy()
        if self.tag == "perturbed":
            return np.asarray(self.spec, dtype=np.float64)
        if self.tag == "particles":
            idx = toy.theta_index(self.posterior.thetas)
            masses = np.zeros(toy.n_atoms)
            np.add.at(masses, idx, self.posterior.weights)
            return masses
        raise ValueError(f"unknown theta source {self.tag!r}")


# ---------------------------------------------------------------------------
# design proposers


class Proposer:
    """Supplies designs during a rollout batch; may record for gradients."""

    trainable = False
    adaptive = True

    def start(self, n: int, prefix: History, record: bool) -> dict:
        return {}

    def propose(self, state: dict, rng: Optional[np.random.Generator]) -> np.ndarray:
        raise NotImplementedError

    def observe(self, state: dict, raw: np.ndarray, y: np.ndarray, record: bool) -> None:
        pass

    def propose_single(self, history: History, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        raise NotImplementedError


class NetworkProposer(Proposer):
    trainable = True

    def __init__(self, policy: PolicyNetwork):
        self.policy = policy

    def start(self, n, prefix, record):
        policy = self.policy
        pooled = policy.zero_pool(n)
        prefix_caches = []
        if len(prefix):
            raws = policy.model.unconstrain_design(prefix.design_matrix(policy.model.design_dim))
            ys = prefix.outcome_vector()
            for i in range(len(prefix)):
                r, cache = policy.pair_forward(raws[i : i + 1], ys[i : i + 1])
                pooled = pooled + r  # broadcast single prefix row over the batch
                if record:
                    prefix_caches.append(cache)
        return {
            "n": n,
            "pooled": pooled,
            "prefix_caches": prefix_caches,
            "dec_acts": [],
            "pair_caches": [],
            "record": record,
        }

    def propose(self, state, rng):
        raw, acts = self.policy.decode(state["pooled"])
        if state["record"]:
            state["dec_acts"].append(acts)
        return raw

    def observe(self, state, raw, y, record):
        r, cache = self.policy.pair_forward(raw, y)
        state["pooled"] = state["pooled"] + r
        if record:
            state["pair_caches"].append(cache)

    def propose_single(self, history, rng=None):
        return next_design(self.policy, history)


class FixedDesignProposer(Proposer):
    """A precomputed raw-design list; the static (non-adaptive) baseline."""

    adaptive = False

    def __init__(self, raw_designs: np.ndarray, offset: int = 0):
        self.raw_designs = np.atleast_2d(np.asarray(raw_designs, dtype=np.float64))
        self.offset = offset

    def start(self, n, prefix, record):
        return {"n": n, "t": len(prefix) - self.offset}

    def propose(self, state, rng):
        raw = self.raw_designs[state["t"]]
        state["t"] += 1
        return np.broadcast_to(raw, (state["n"], raw.size)).copy()

    def propose_single(self, history, rng=None):
        return self.raw_designs[len(history) - self.offset]


class TabularProposer(FixedDesignProposer):
    """Fixed designs exposed as trainable parameters (design-space optimization)."""

    trainable = True

    def params(self) -> dict[str, np.ndarray]:
        return {"designs": self.raw_designs}

    def load(self, params: dict[str, np.ndarray]) -> None:
        self.raw_designs = params["designs"]


class RandomProposer(Proposer):
    """History-independent designs drawn fresh from a raw-space normal."""

    adaptive = False

    def __init__(self, model: Model, scale: Optional[float] = None):
        self.dim = model.raw_design_dim
        self.scale = model.random_raw_scale() if scale is None else scale

    def start(self, n, prefix, record):
        return {"n": n}

    def propose(self, state, rng):
        return self.scale * rng.standard_normal((state["n"], self.dim))

    def propose_single(self, history, rng=None):
        if rng is None:
            raise ValueError("random proposer needs an rng")
        return self.scale * rng.standard_normal(self.dim)


def as_proposer(policy_or_designs, model: Optional[Model] = None) -> Proposer:
    if isinstance(policy_or_designs, Proposer):
        return policy_or_designs
    if isinstance(policy_or_designs, PolicyNetwork):
        return NetworkProposer(policy_or_designs)
    if isinstance(policy_or_designs, (list, np.ndarray)):
        return FixedDesignProposer(np.asarray(policy_or_designs, dtype=np.float64))
    raise TypeError(f"cannot interpret {type(policy_or_designs)!r} as a design proposer")


# ---------------------------------------------------------------------------
# rollout engine


@dataclass
class StepRecord:
    raw: np.ndarray  # (N, d_raw)
    design: np.ndarray  # (N, d)
    y: np.ndarray  # (N,)
    z: Optional[np.ndarray]  # innovation, reparameterizable kinds


@dataclass
class RolloutRecord:
    model: Model
    proposer: Proposer
    thetas: np.ndarray  # (N, L+1, theta_dim)
    prefix: History
    steps: list[StepRecord]
    loglik: np.ndarray  # (N, L+1) accumulated over suffix steps
    state: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.thetas.shape[0]

    @property
    def contrasts(self) -> int:
        return self.thetas.shape[1] - 1


def simulate_rollouts(
    model: Model,
    proposer: Proposer,
    thetas: np.ndarray,
    prefix: History,
    horizon: int,
    rng: Optional[np.random.Generator],
    record: bool = False,
    innovations: Optional[list[np.ndarray]] = None,
) -> RolloutRecord:
    """Roll the proposer forward from the prefix, accumulating per-theta
    suffix log-likelihoods. Outcomes are drawn under theta_0 per rollout,
    or rebuilt from supplied innovations (common-random-number mode)."""
    n = thetas.shape[0]
    tau = len(prefix)
    state = proposer.start(n, prefix, record)
    loglik = np.zeros((n, thetas.shape[1]))
    steps: list[StepRecord] = []
    for i, t in enumerate(range(tau, horizon)):
        raw = proposer.propose(state, rng)
        design = model.constrain_design(raw)
        if innovations is not None:
            y, _ = model.outcome_from_innovation(thetas[:, 0], design, innovations[i])
            z = np.asarray(innovations[i], dtype=np.float64)
        else:
            y, z = model.sample_outcome(thetas[:, 0], design, rng)
        loglik += model.log_likelihood(thetas, design[:, None, :], y[:, None])
        steps.append(StepRecord(raw=raw, design=design, y=y, z=z))
        if t < horizon - 1:  # the final pair never feeds another design
            proposer.observe(state, raw, y, record)
    return RolloutRecord(
        model=model, proposer=proposer, thetas=thetas, prefix=prefix,
        steps=steps, loglik=loglik, state=state,
    )


def spce_integrand(loglik: np.ndarray) -> np.ndarray:
    n_contrasts = loglik.shape[1] - 1
    return loglik[:, 0] - logsumexp(loglik, axis=1) + np.log(n_contrasts + 1)


def snmc_integrand(loglik: np.ndarray) -> np.ndarray:
    n_contrasts = loglik.shape[1] - 1
    with np.errstate(divide="ignore"):
        denom = logsumexp(loglik[:, 1:], axis=1)
    return loglik[:, 0] - denom + np.log(n_contrasts)


def _estimate(values: np.ndarray) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def _draw_thetas(theta_source: ThetaSource, rng, n: int, contrasts: int) -> np.ndarray:
    flat = theta_source.draw(rng, n * (contrasts + 1))
    return flat.reshape(n, contrasts + 1, -1)


def _check_args(contrasts: int, prefix: History, horizon: int) -> None:
    if contrasts < 1:
        raise ValueError("need at least one contrastive sample (L >= 1)")
    if len(prefix) > horizon:
        raise ValueError("prefix longer than the experiment horizon")


def _exact_value(model, proposer, theta_source, prefix, horizon) -> float:
    if not isinstance(model, ToyModel):
        raise ValueError("exact-expectation mode needs an enumerable toy model")
    masses = theta_source.atom_masses(model)
    table = toy_enumerate(model, lambda h: proposer.propose_single(h), horizon, prefix=prefix)
    return exact_eig_from_table(table, masses)


def spce(
    model: Model,
    policy_or_designs,
    theta_source: ThetaSource,
    prefix: Optional[History],
    horizon: int,
    contrasts: int,
    n_rollouts: int,
    rng: Optional[np.random.Generator],
    exact: bool = False,
    seed: Optional[int] = None,
) -> BoundEstimate:
    """Sequential contrastive lower bound; per-rollout values never exceed
    log(L+1). ``exact=True`` replaces sampling with full enumeration (toy)."""
    prefix = prefix or History()
    _check_args(contrasts, prefix, horizon)
    proposer = as_proposer(policy_or_designs, model)
    kind = "sPCE" if proposer.adaptive else "PCE"
    if exact:
        value = _exact_value(model, proposer, theta_source, prefix, horizon)
        return BoundEstimate(kind, value, 0.0, 0, contrasts, len(prefix), theta_source.tag, seed)
    thetas = _draw_thetas(theta_source, rng, n_rollouts, contrasts)
    rec = simulate_rollouts(model, proposer, thetas, prefix, horizon, rng)
    value, se = _estimate(spce_integrand(rec.loglik))
    return BoundEstimate(kind, value, se, n_rollouts, contrasts, len(prefix), theta_source.tag, seed)


def snmc(
    model: Model,
    policy_or_designs,
    theta_source: ThetaSource,
    prefix: Optional[History],
    horizon: int,
    contrasts: int,
    n_rollouts: int,
    rng: Optional[np.random.Generator],
    exact: bool = False,
    seed: Optional[int] = None,
) -> BoundEstimate:
    """Nested Monte Carlo upper bound: the denominator excludes theta_0."""
    prefix = prefix or History()
    _check_args(contrasts, prefix, horizon)
    proposer = as_proposer(policy_or_designs, model)
    if exact:
        value = _exact_value(model, proposer, theta_source, prefix, horizon)
        return BoundEstimate("sNMC", value, 0.0, 0, contrasts, len(prefix), theta_source.tag, seed)
    thetas = _draw_thetas(theta_source, rng, n_rollouts, contrasts)
    rec = simulate_rollouts(model, proposer, thetas, prefix, horizon, rng)
    value, se = _estimate(snmc_integrand(rec.loglik))
    return BoundEstimate("sNMC", value, se, n_rollouts, contrasts, len(prefix), theta_source.tag, seed)


def paired_bounds(
    model: Model,
    policy_or_designs,
    theta_source: ThetaSource,
    prefix: Optional[History],
    horizon: int,
    contrasts: int,
    n_rollouts: int,
    rng: Optional[np.random.Generator],
    exact: bool = False,
    seed: Optional[int] = None,
) -> tuple[BoundEstimate, BoundEstimate, float]:
    """Lower and upper bounds sharing rollouts; returns (lower, upper, joint se
    of their per-rollout difference)."""
    prefix = prefix or History()
    _check_args(contrasts, prefix, horizon)
    proposer = as_proposer(policy_or_designs, model)
    kind = "sPCE" if proposer.adaptive else "PCE"
    if exact:
        value = _exact_value(model, proposer, theta_source, prefix, horizon)
        lo = BoundEstimate(kind, value, 0.0, 0, contrasts, len(prefix), theta_source.tag, seed)
        hi = BoundEstimate("sNMC", value, 0.0, 0, contrasts, len(prefix), theta_source.tag, seed)
        return lo, hi, 0.0
    thetas = _draw_thetas(theta_source, rng, n_rollouts, contrasts)
    rec = simulate_rollouts(model, proposer, thetas, prefix, horizon, rng)
    lo_vals = spce_integrand(rec.loglik)
    hi_vals = snmc_integrand(rec.loglik)
    lo = BoundEstimate(kind, *_estimate(lo_vals), n_rollouts, contrasts, len(prefix), theta_source.tag, seed)
    hi = BoundEstimate("sNMC", *_estimate(hi_vals), n_rollouts, contrasts, len(prefix), theta_source.tag, seed)
    _, joint_se = _estimate(hi_vals - lo_vals)
    return lo, hi, joint_se


# ---------------------------------------------------------------------------
# gradients


def _grad_mode(model: Model, grad_mode: str) -> str:
    if grad_mode == "auto":
        return "pathwise" if model.reparameterizable else "score"
    if grad_mode == "pathwise" and not model.reparameterizable:
        raise ValueError(
            f"pathwise gradients need reparameterizable outcomes; {model.name} has kind "
            f"{model.outcome_kind!r}"
        )
    if grad_mode not in ("pathwise", "score"):
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    return grad_mode


def spce_gradient(
    model: Model,
    policy_or_proposer,
    theta_source: ThetaSource,
    prefix: Optional[History],
    horizon: int,
    contrasts: int,
    n_rollouts: int,
    rng: Optional[np.random.Generator],
    grad_mode: str = "auto",
    innovations: Optional[list[np.ndarray]] = None,
    thetas: Optional[np.ndarray] = None,
) -> tuple[dict[str, np.ndarray], BoundEstimate]:
    """Gradient of the contrastive lower bound w.r.t. the proposer's parameters.

    Path-wise mode differentiates the full autoregressive computation with
    outcomes expressed through fixed innovations; score mode uses REINFORCE
    with a leave-one-out batch baseline. ``innovations``/``thetas`` pin the
    randomness for common-random-number checks.
    """
    prefix = prefix or History()
    _check_args(contrasts, prefix, horizon)
    proposer = as_proposer(policy_or_proposer, model)
    if not proposer.trainable:
        raise ValueError("proposer exposes no trainable parameters")
    mode = _grad_mode(model, grad_mode)
    if thetas is None:
        thetas = _draw_thetas(theta_source, rng, n_rollouts, contrasts)
    rec = simulate_rollouts(
        model, proposer, thetas, prefix, horizon, rng,
        record=True, innovations=innovations,
    )
    f = spce_integrand(rec.loglik)
    value, se = _estimate(f)
    estimate = BoundEstimate(
        "sPCE" if proposer.adaptive else "PCE", value, se,
        rec.n, contrasts, len(prefix), theta_source.tag,
    )
    grads = _rollout_backward(rec, mode, f)
    return grads, estimate


def _rollout_backward(rec: RolloutRecord, mode: str, f: np.ndarray) -> dict[str, np.ndarray]:
    model = rec.model
    proposer = rec.proposer
    n, width = rec.loglik.shape
    # d f / d s_ell = indicator(ell=0) - softmax(s)_ell
    with np.errstate(invalid="ignore"):
        soft = np.exp(rec.loglik - logsumexp(rec.loglik, axis=1, keepdims=True))
    coeff = -soft
    coeff[:, 0] += 1.0

    if mode == "score":
        if n > 1:
            baseline = (f.sum() - f) / (n - 1.0)
        else:
            baseline = np.zeros_like(f)
        advantage = f - baseline
    else:
        advantage = None

    is_network = isinstance(proposer, NetworkProposer)
    if is_network:
        policy = proposer.policy
        grads = {k: np.zeros_like(v) for k, v in policy.to_dict().items()}
        g_pool = policy.zero_pool(n)
        dec_acts = rec.state["dec_acts"]
        pair_caches = rec.state["pair_caches"]
    else:
        grads = {k: np.zeros_like(v) for k, v in proposer.params().items()}

    for i in range(len(rec.steps) - 1, -1, -1):
        step = rec.steps[i]
        du = np.zeros_like(step.raw)
        dy_enc = np.zeros_like(step.y)
        if is_network and i < len(rec.steps) - 1:
            pair_grads, du, dy_enc = policy.pair_backward(pair_caches[i], g_pool)
            gc.add_scaled(grads, pair_grads)

        design_b = step.design[:, None, :]
        y_b = step.y[:, None]
        _, dll_design = model.loglik_design_grad(rec.thetas, design_b, y_b)
        g_design = np.einsum("nl,nld->nd", coeff, dll_design)
        if mode == "score":
            g_design += advantage[:, None] * dll_design[:, 0, :]
        else:
            dll_y = model.loglik_outcome_grad(rec.thetas, design_b, y_b)
            gy = (coeff * dll_y).sum(axis=1) + dy_enc
            _, dy_design = model.outcome_from_innovation(rec.thetas[:, 0], step.design, step.z)
            g_design += gy[:, None] * dy_design

        g_raw = du + g_design * model.constrain_grad(step.raw)

        if is_network:
            dec_grads, d_pool = policy.decode_backward(dec_acts[i], g_raw)
            gc.add_scaled(grads, dec_grads)
            g_pool += d_pool
        else:
            grads["designs"][i + (len(rec.prefix) - proposer.offset)] += g_raw.sum(axis=0)

    if is_network and rec.state["prefix_caches"]:
        upstream = g_pool.sum(axis=0, keepdims=True)
        for cache in rec.state["prefix_caches"]:
            pair_grads, _, _ = policy.pair_backward(cache, upstream)
            gc.add_scaled(grads, pair_grads)

    for k in grads:
        grads[k] /= n
    return grads


def seeded_spce_loss(
    model: Model,
    policy: PolicyNetwork,
    theta_source: ThetaSource,
    prefix: Optional[History],
    horizon: int,
    contrasts: int,
    n_rollouts: int,
    seed: int,
):
    """Freeze thetas and innovations so the bound becomes a deterministic
    function of the policy parameters; returns (loss_fn, grad_fn) for
    finite-difference verification."""
    if not model.reparameterizable:
        raise ValueError("common-random-number loss needs reparameterizable outcomes")
    prefix = prefix or History()
    rng = np.random.default_rng(seed)
    thetas = _draw_thetas(theta_source, rng, n_rollouts, contrasts)
    innovations = [
        rng.standard_normal(n_rollouts) for _ in range(horizon - len(prefix))
    ]
    work = policy.clone()

    def loss_fn(params: dict[str, np.ndarray]) -> float:
        work.load_dict(params)
        rec = simulate_rollouts(
            model, NetworkProposer(work), thetas, prefix, horizon,
            rng=None, innovations=innovations,
        )
        return float(spce_integrand(rec.loglik).mean())

    def grad_fn(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        work.load_dict(params)
        grads, _ = spce_gradient(
            model, work, theta_source, prefix, horizon, contrasts, n_rollouts,
            rng=None, grad_mode="pathwise", innovations=innovations, thetas=thetas,
        )
        return grads

    return loss_fn, grad_fn
