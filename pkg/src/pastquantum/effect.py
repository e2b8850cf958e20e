"""Backward propagation of the effect matrix from ``E(T) = I``.

The backward step from grid point ``n+1`` to ``n`` consumes the same record
element (``dY[n]``, ``dN[n]``) as the forward step from ``n`` to ``n+1``.
Effects are renormalised to ``Tr(E) = dim`` after each step so that a
trivially propagated identity stays the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePastState, InvalidParameter, InvalidRecord
from .filtering import (
    MeasurementRecord,
    Propagator,
    _check_increments,
    _interruption_map,
    apply_projectors,
    clicks_from_counts,
)
from .model import Model
from .qops import PROB_FLOOR, EffectMatrix


def normalize_effects(x: np.ndarray):
    d = x.shape[-1]
    tr = np.trace(x, axis1=-2, axis2=-1).real
    if np.any(~np.isfinite(tr)) or np.any(tr <= PROB_FLOOR):
        raise DegeneratePastState(f"effect trace underflow (min {np.min(tr):.3e})")
    scale = tr / d
    return x / scale[..., None, None], np.log(scale)


@dataclass
class EffectTrajectory:
    """Normalised effects on the grid; ``ops[-1]`` is the identity.

    At an interruption step ``n`` the stored effect is the one conditioned on
    data after the measurement (``E_+``); the effect including the unread
    measurement (``E_-``) is kept in ``pre_interruption``.
    """

    times: np.ndarray
    ops: np.ndarray
    log_norms: np.ndarray
    pre_interruption: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def effect(self, n: int) -> EffectMatrix:
        return EffectMatrix(self.ops[n], self.log_norms[n])

    @property
    def effects(self) -> list:
        return [self.effect(n) for n in range(len(self))]


def diffusive_backstep(E: EffectMatrix, model: Model, dY_prev: float, dt: float) -> EffectMatrix:
    """``E_{t-dt} = E_t + dE_t`` for the homodyne record element of ``[t-dt, t]``."""
    if model.diffusive is None:
        raise InvalidParameter("model has no diffusive channel")
    _check_increments(dY_prev)
    prop = Propagator(model, dt, "euler")
    out, log_s = normalize_effects(prop.backward(np.asarray(E.op)[None], np.array([dY_prev])))
    return EffectMatrix(out[0], E.log_norm + log_s[0])


def linear_diffusive_backincrement(E_op, model: Model, dY_prev: float, dt: float) -> np.ndarray:
    """Unnormalised ``E_t + dE_t`` without rescaling."""
    return Propagator(model, dt, "euler").backward(np.asarray(E_op, dtype=complex)[None], np.array([dY_prev]))[0]


def jump_backstep(E: EffectMatrix, model: Model, dN_prev, dt: float) -> EffectMatrix:
    """Adjoint counting step: ``L^dag E L`` on a click, no-click drift otherwise."""
    if model.n_counting == 0:
        raise InvalidParameter("model has no counting channel")
    dN = np.atleast_1d(np.asarray(dN_prev, dtype=int))
    if dN.shape != (model.n_counting,):
        raise InvalidRecord(f"dN must have one entry per counting channel ({model.n_counting})")
    click = clicks_from_counts(dN[None])
    prop = Propagator(model, dt, "euler")
    out, log_s = normalize_effects(prop.backward(np.asarray(E.op)[None], None, click))
    return EffectMatrix(out[0], E.log_norm + log_s[0])


def backward_pass(model: Model, dt, dY=None, clicks=None, interruptions=(), n_steps=None, batch=None, stop=0,
                  scheme="kraus"):
    """Propagate ``B`` effects from ``E_N = I`` back to grid index ``stop``.

    Returns effects ``(B, N+1, d, d)`` (entries below ``stop`` left
    unset), cumulative log-scales ``(B, N+1)`` and, per interruption step,
    the effect with the unread measurement applied plus its log-scale.
    """
    if n_steps is None:
        n_steps = (dY if dY is not None else clicks).shape[1]
    if batch is None:
        batch = (dY if dY is not None else clicks).shape[0]
    _check_increments(dY)
    inter = _interruption_map(interruptions, n_steps)
    d = model.dim
    effects = np.zeros((batch, n_steps + 1, d, d), dtype=complex)
    logs = np.zeros((batch, n_steps + 1))
    pre = {}
    E = np.broadcast_to(np.eye(d, dtype=complex), (batch, d, d)).copy()
    log = np.zeros(batch)
    prop = Propagator(model, dt, scheme) if n_steps else None
    for n in range(n_steps, stop - 1, -1):
        if n < n_steps:
            if n + 1 in inter:
                E, ls = normalize_effects(apply_projectors(E, inter[n + 1]))
                log = log + ls
                pre[n + 1] = (E.copy(), log.copy())
            step_dY = None if dY is None else dY[:, n]
            step_clicks = None if clicks is None else clicks[:, n]
            E, ls = normalize_effects(prop.backward(E, step_dY, step_clicks))
            log = log + ls
        effects[:, n] = E
        logs[:, n] = log
    if stop == 0 and 0 in inter:
        Em, ls = normalize_effects(apply_projectors(E, inter[0]))
        pre[0] = (Em, log + ls)
    return effects, logs, pre


def run_backward(record: MeasurementRecord, model: Model, interruptions=(), scheme: str = "kraus") -> EffectTrajectory:
    """Effect trajectory for a stored record, ``E(T) = I``."""
    record.check_model(model)
    dY = record.dY[None] if record.dY.size else None
    clicks = record.clicks()[None] if model.n_counting else None
    if model.diffusive is not None and dY is None and record.n_steps:
        raise InvalidRecord("diffusive model needs dY increments")
    effects, logs, pre = backward_pass(model, record.dt, dY, clicks, interruptions, n_steps=record.n_steps, batch=1,
                                       scheme=scheme)
    pre_eff = {n: EffectMatrix(e[0], ls[0]) for n, (e, ls) in pre.items()}
    return EffectTrajectory(record.times, effects[0], logs[0], pre_eff)
