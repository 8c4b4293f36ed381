"""HTTP surface for stepping individual subjects through a learned policy.

Sessions are held in memory with TTL eviction; every number in a response is
computed by the same policy object the library exposes, so service answers
are bit-identical to direct calls. Payloads are JSON with real numbers only:
numeric strings are rejected.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, StrictFloat

from .data import InformationState

DEFAULT_TTL_SECONDS = 3600.0


class CreateSessionBody(BaseModel):
    x0: list[StrictFloat]


class ObserveBody(BaseModel):
    test: Literal[1, 2]
    values: list[StrictFloat]


@dataclass
class Session:
    id: str
    x0: np.ndarray
    x1: Optional[np.ndarray] = None
    x2: Optional[np.ndarray] = None
    state: InformationState = InformationState.S0
    history: list = field(default_factory=list)
    last_access: float = field(default_factory=time.monotonic)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def features(self) -> np.ndarray:
        parts = [self.x0]
        if 1 in self.state.blocks and self.x1 is not None:
            parts.append(self.x1)
        if 2 in self.state.blocks and self.x2 is not None:
            parts.append(self.x2)
        return np.concatenate(parts)


def _error(status: int, code: str, message: str, fld: Optional[str] = None) -> JSONResponse:
    body = {"code": code, "message": message}
    if fld is not None:
        body["field"] = fld
    return JSONResponse(status_code=status, content=body)


def create_app(policy, ttl_seconds: float = DEFAULT_TTL_SECONDS) -> FastAPI:
    """Build the service around one immutable policy object."""
    from . import __version__

    app = FastAPI(title="sequential testing policy service", version=__version__)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()
    p0, p1, p2 = policy.dims
    block_dim = {1: p1, 2: p2}

    @app.exception_handler(RequestValidationError)
    async def _validation_handler(request: Request, exc: RequestValidationError):
        err = exc.errors()[0]
        loc = [str(p) for p in err.get("loc", []) if p != "body"]
        return _error(400, "validation", err.get("msg", "invalid request"),
                      ".".join(loc) or None)

    def _purge(now: float) -> None:
        with registry_lock:
            dead = [sid for sid, s in sessions.items() if now - s.last_access > ttl_seconds]
            for sid in dead:
                del sessions[sid]

    def _get_session(sid: str) -> Optional[Session]:
        _purge(time.monotonic())
        with registry_lock:
            sess = sessions.get(sid)
            if sess is not None:
                sess.last_access = time.monotonic()
            return sess

    def _recommendation(sess: Session) -> Optional[dict]:
        """Action, contrasts, and per-action loss deltas at the current state."""
        if sess.state is InformationState.S12:
            return None
        if sess.state is InformationState.S0:
            contrasts = policy.contrast_stage1(sess.x0) if hasattr(policy, "contrast_stage1") else None
            action = policy.decide0(sess.x0)
            if contrasts is not None:
                deltas = {"stop": 0.0, "test1": contrasts[1], "test2": contrasts[2]}
                contrasts_out = {"test1": contrasts[1], "test2": contrasts[2]}
            else:
                deltas = contrasts_out = None
        else:
            j = 1 if sess.state is InformationState.S1only else 2
            jc = 3 - j
            feats = sess.features()
            contrast = policy.contrast_stage2(j, feats) if hasattr(policy, "contrast_stage2") else None
            action = policy.decide_next(j, feats)
            if contrast is not None:
                deltas = {"stop": 0.0, f"test{jc}": contrast}
                contrasts_out = {f"test{jc}": contrast}
            else:
                deltas = contrasts_out = None
        return {
            "action": int(action),
            "action_label": {0: "stop", 1: "acquire test 1", 2: "acquire test 2"}[int(action)],
            "contrasts": contrasts_out,
            "deltas": deltas,
        }

    def _session_payload(sess: Session) -> dict:
        risk = policy.predict(sess.state, sess.features())
        return {
            "id": sess.id,
            "state": sess.state.value,
            "risk": risk,
            "terminal": sess.state is InformationState.S12,
            "recommendation": _recommendation(sess),
            "history": list(sess.history),
        }

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.get("/policy")
    def policy_meta():
        return {
            "method": getattr(policy, "method", "unknown"),
            "dims": {"p0": p0, "p1": p1, "p2": p2},
            "costs": {"c1": policy.costs.c1, "c2": policy.costs.c2},
            "outcome_kind": getattr(policy, "outcome_kind", "binary"),
            "feature_labels": {
                "x0": [f"x0_{i + 1}" for i in range(p0)],
                "x1": [f"x1_{i + 1}" for i in range(p1)],
                "x2": [f"x2_{i + 1}" for i in range(p2)],
            },
        }

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        if len(body.x0) != p0:
            return _error(400, "dim_mismatch", f"x0 must have {p0} values", "x0")
        sess = Session(id=uuid.uuid4().hex, x0=np.array(body.x0, dtype=float))
        sess.history.append({"event": "created", "state": sess.state.value})
        with registry_lock:
            sessions[sess.id] = sess
        return _session_payload(sess)

    @app.post("/sessions/{sid}/observe")
    def observe(sid: str, body: ObserveBody):
        sess = _get_session(sid)
        if sess is None:
            return _error(404, "unknown_session", f"no session {sid}")
        if len(body.values) != block_dim[body.test]:
            return _error(400, "dim_mismatch",
                          f"test {body.test} expects {block_dim[body.test]} values", "values")
        with sess.lock:
            if body.test in sess.state.tests:
                return _error(409, "inadmissible",
                              f"test {body.test} already observed in state {sess.state.value}")
            values = np.array(body.values, dtype=float)
            if body.test == 1:
                sess.x1 = values
            else:
                sess.x2 = values
            have = set(sess.state.tests) | {body.test}
            sess.state = {
                frozenset({1}): InformationState.S1only,
                frozenset({2}): InformationState.S2only,
                frozenset({1, 2}): InformationState.S12,
            }[frozenset(have)]
            sess.history.append({
                "event": "observed",
                "test": body.test,
                "state": sess.state.value,
            })
            return _session_payload(sess)

    @app.get("/sessions/{sid}/whatif")
    def whatif(sid: str):
        sess = _get_session(sid)
        if sess is None:
            return _error(404, "unknown_session", f"no session {sid}")
        actions = []
        if sess.state is not InformationState.S12:
            actions.append({"action": "stop", "contrast": 0.0, "cost_delta": 0.0})
            if sess.state is InformationState.S0:
                if hasattr(policy, "contrast_stage1"):
                    contrasts = policy.contrast_stage1(sess.x0)
                else:
                    contrasts = {1: None, 2: None}
                for j in (1, 2):
                    actions.append({
                        "action": f"test{j}",
                        "contrast": contrasts[j],
                        "cost_delta": policy.costs.cost_of_test(j),
                    })
            else:
                j = 1 if sess.state is InformationState.S1only else 2
                jc = 3 - j
                contrast = (policy.contrast_stage2(j, sess.features())
                            if hasattr(policy, "contrast_stage2") else None)
                actions.append({
                    "action": f"test{jc}",
                    "contrast": contrast,
                    "cost_delta": policy.costs.cost_of_test(jc),
                })
        return {"state": sess.state.value, "actions": actions}

    return app
