"""HTTP session API for live experiments: one session per participant,
serialized per session id, with in-process policy refinement reporting
progress through the status endpoint.
"""

from __future__ import annotations

import io
import csv
import threading
import uuid
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel

from .bounds import NetworkProposer, Proposer
from .config import EngineConfig
from .inference import ParticlePosterior, fit_posterior_is
from .models.base import History, Model, OutcomeSupportError
from .orchestrate import TrainConfig, refine_policy
from .policy import PolicyNetwork, init_policy, load_policy
from .seeding import rng_stream


class CreateSessionBody(BaseModel):
    seed: Optional[int] = None
    idempotency_key: Optional[str] = None


class OutcomeBody(BaseModel):
    value: float
    idempotency_key: Optional[str] = None


class RefineBody(BaseModel):
    budget: Optional[int] = None
    idempotency_key: Optional[str] = None


@dataclass
class Session:
    id: str
    model: Model
    proposer: Proposer
    horizon: int
    schedule: list[int]
    refine_config: TrainConfig
    seed: int
    status: str = "awaiting-outcome"
    history: History = field(default_factory=History)
    pending_design: Optional[np.ndarray] = None
    refine_progress: Optional[dict] = None
    refine_count: int = 0
    posterior: Optional[ParticlePosterior] = None
    lock: threading.Lock = field(default_factory=threading.Lock)
    seen_keys: dict = field(default_factory=dict)

    def outcome_bounds(self) -> Optional[dict]:
        # structured support limits so clients never hardcode model constants
        if self.model.outcome_kind == "censored-slider":
            lo, hi, _, _ = self.model._atoms()
            return {"lo": float(lo), "hi": float(hi)}
        if self.model.outcome_kind == "binary-choice":
            return {"choices": [0.0, 1.0]}
        return None

    def view(self) -> dict:
        design = None
        if self.status == "awaiting-outcome" and len(self.history) < self.horizon:
            design = self.current_design()
        return {
            "id": self.id,
            "model": self.model.name,
            "outcome_kind": self.model.outcome_kind,
            "outcome_support": self.model.outcome_support_text(),
            "outcome_bounds": self.outcome_bounds(),
            "step": len(self.history),
            "horizon": self.horizon,
            "status": self.status,
            "schedule": self.schedule,
            "design": None if design is None else self.model.design_payload(design),
            "design_vector": None if design is None else [float(v) for v in design],
            "design_labels": list(self.model.design_labels),
            "refining": self.refine_progress,
            "history": self.history_payload(),
        }

    def current_design(self) -> np.ndarray:
        if self.pending_design is None:
            raw = self.proposer.propose_single(
                self.history, rng_stream(self.seed, "design", len(self.history))
            )
            self.pending_design = self.model.constrain_design(np.asarray(raw, dtype=np.float64))
        return self.pending_design

    def history_payload(self) -> list[dict]:
        return [
            {
                "step": t + 1,
                "design": self.model.design_payload(self.history.designs[t]),
                "outcome": float(self.history.outcomes[t]),
            }
            for t in range(len(self.history))
        ]


class SessionStore:
    def __init__(self, config: EngineConfig, policy_stem: Optional[str] = None):
        self.config = config
        self.model = config.model.build()
        self.policy_stem = policy_stem
        self.sessions: dict[str, Session] = {}
        self.create_keys: dict[str, str] = {}
        self.lock = threading.Lock()

    def _base_policy(self, seed: int) -> PolicyNetwork:
        if self.policy_stem:
            return load_policy(self.policy_stem, self.model)
        return init_policy(
            self.model, rng_stream(seed, "policy-init"),
            self.config.policy.build_arch(self.model),
        )

    def create(self, body: CreateSessionBody) -> Session:
        with self.lock:
            if body.idempotency_key and body.idempotency_key in self.create_keys:
                return self.sessions[self.create_keys[body.idempotency_key]]
            seed = self.config.seed if body.seed is None else int(body.seed)
            sid = uuid.uuid4().hex[:12]
            policy = self._base_policy(seed)
            session = Session(
                id=sid,
                model=self.model,
                proposer=NetworkProposer(policy),
                horizon=self.config.schedule.horizon,
                schedule=list(self.config.schedule.taus),
                refine_config=self.config.refine,
                seed=seed,
            )
            self.sessions[sid] = session
            if body.idempotency_key:
                self.create_keys[body.idempotency_key] = sid
            return session

    def get(self, sid: str) -> Session:
        session = self.sessions.get(sid)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {sid!r}")
        return session


def _run_refinement(session: Session, budget: int) -> None:
    model = session.model
    try:
        posterior = fit_posterior_is(
            model, session.history, session.refine_config.particles,
            rng_stream(session.seed, "stage", session.refine_count, "infer"),
        )
        config = replace(session.refine_config, steps=budget)
        done = {"n": 0}

        def on_step(step, value):
            done["n"] = step + 1
            session.refine_progress = {"done": done["n"], "total": budget}

        tuned, _ = refine_policy(
            model, session.proposer.policy, posterior, session.history.copy(),
            session.horizon, config,
            rng_stream(session.seed, "stage", session.refine_count, "refine"),
            on_step=on_step,
        )
        session.refine_progress = {"done": budget, "total": budget}
        with session.lock:
            session.proposer = NetworkProposer(tuned)
            session.posterior = posterior
    finally:
        with session.lock:
            session.refine_count += 1
            session.pending_design = None
            session.refine_progress = None
            session.status = (
                "complete" if len(session.history) >= session.horizon else "awaiting-outcome"
            )


def create_app(config: EngineConfig, policy_stem: Optional[str] = None) -> FastAPI:
    store = SessionStore(config, policy_stem)
    app = FastAPI(title="bedloop session api")
    app.state.store = store

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        session = store.create(body)
        return session.view()

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        return store.get(sid).view()

    @app.get("/sessions/{sid}/design")
    def get_design(sid: str):
        session = store.get(sid)
        with session.lock:
            if session.status == "refining":
                raise HTTPException(status_code=409, detail="session is refining")
            if session.status == "complete":
                raise HTTPException(status_code=409, detail="session is complete")
            design = session.current_design()
            return {
                "step": len(session.history) + 1,
                "design": session.model.design_payload(design),
                "design_vector": [float(v) for v in design],
                "design_labels": list(session.model.design_labels),
            }

    @app.post("/sessions/{sid}/outcome")
    def post_outcome(sid: str, body: OutcomeBody):
        session = store.get(sid)
        with session.lock:
            if body.idempotency_key and body.idempotency_key in session.seen_keys:
                return session.seen_keys[body.idempotency_key]
            if session.status == "refining":
                raise HTTPException(status_code=409, detail="session is refining")
            if session.status == "complete":
                raise HTTPException(status_code=409, detail="session is complete")
            try:
                value = session.model.validate_outcome(body.value)
            except OutcomeSupportError as err:
                raise HTTPException(status_code=422, detail=str(err)) from err
            design = session.current_design()
            session.history.append(design, value)
            session.pending_design = None
            if len(session.history) >= session.horizon:
                session.status = "complete"
            response = session.view()
            if body.idempotency_key:
                session.seen_keys[body.idempotency_key] = response
            return response

    @app.post("/sessions/{sid}/refine")
    def post_refine(sid: str, body: RefineBody):
        session = store.get(sid)
        with session.lock:
            if body.idempotency_key and body.idempotency_key in session.seen_keys:
                return session.seen_keys[body.idempotency_key]
            if session.status == "refining":
                raise HTTPException(status_code=409, detail="refinement already running")
            if session.status == "complete":
                raise HTTPException(status_code=409, detail="session is complete")
            if len(session.history) == 0:
                raise HTTPException(status_code=409, detail="no data to refine on yet")
            budget = session.refine_config.steps if body.budget is None else int(body.budget)
            session.status = "refining"
            session.refine_progress = {"done": 0, "total": budget}
            thread = threading.Thread(target=_run_refinement, args=(session, budget), daemon=True)
            thread.start()
            response = {"status": "refining", "refining": session.refine_progress}
            if body.idempotency_key:
                session.seen_keys[body.idempotency_key] = response
            return response

    @app.get("/sessions/{sid}/status")
    def get_status(sid: str):
        session = store.get(sid)
        return {
            "status": session.status,
            "step": len(session.history),
            "horizon": session.horizon,
            "schedule": session.schedule,
            "refining": session.refine_progress,
        }

    @app.get("/sessions/{sid}/posterior")
    def get_posterior(sid: str):
        session = store.get(sid)
        with session.lock:
            posterior = session.posterior
            if posterior is None or posterior.history_len != len(session.history):
                posterior = fit_posterior_is(
                    session.model, session.history, session.refine_config.particles,
                    rng_stream(session.seed, "posterior", len(session.history)),
                )
                session.posterior = posterior
            qs = posterior.quantiles((0.05, 0.5, 0.95))
            mean = posterior.mean()
            return {
                "history_len": posterior.history_len,
                "ess": posterior.ess,
                "n_particles": posterior.n,
                "parameters": [
                    {
                        "name": label,
                        "mean": float(mean[i]),
                        "q05": float(qs[0, i]),
                        "q50": float(qs[1, i]),
                        "q95": float(qs[2, i]),
                    }
                    for i, label in enumerate(session.model.theta_labels)
                ],
            }

    @app.get("/sessions/{sid}/history")
    def get_history(sid: str, format: str = "json"):
        session = store.get(sid)
        if format == "csv":
            buf = io.StringIO()
            writer = csv.writer(buf)
            writer.writerow(["step", *session.model.design_labels, "outcome"])
            for t in range(len(session.history)):
                writer.writerow(
                    [t + 1]
                    + [repr(float(v)) for v in session.history.designs[t]]
                    + [repr(float(session.history.outcomes[t]))]
                )
            return PlainTextResponse(buf.getvalue(), media_type="text/csv")
        return {
            "status": session.status,
            "history": session.history_payload(),
        }

    return app
