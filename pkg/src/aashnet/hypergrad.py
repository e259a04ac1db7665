"""Hypergradients by running the training trajectory backwards.

The reverse sweep walks ``t = T..1``, restoring ``(w_t, v_t)`` from the
trainer's buffer while accumulating the adjoints ``dw`` and ``dv`` of the
weights and velocity. Each step needs one Hessian-vector product and the
matching mixed second derivatives, both from a single forward-over-reverse
sweep of the training tape.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import model
from .errors import NumericalError, ReversalError, ValidationError
from .model import Dataset, HyperParams, Objective, Topology, Weights
from .trainer import (BatchedObjective, BatchPlan, ReversalBuffer, Schedule, TrainState, train,
                      undo_position, undo_velocity)

log = logging.getLogger(__name__)

HYPER_NAMES = ("lam1", "lam2", "alpha")


@dataclass
class HypergradResult:
    d_lam1: float
    d_lam2: float
    d_alpha: float
    d_eta: np.ndarray
    d_gamma: np.ndarray
    valid_loss: float

    def vector(self) -> np.ndarray:
        return np.array([self.d_lam1, self.d_lam2, self.d_alpha])

    def theta_grad(self, h: HyperParams) -> np.ndarray:
        """Gradient in ``(log lam1, log lam2, logit alpha)`` coordinates."""
        return self.vector() * h.dtheta()


def validation_loss(w: Weights, h: HyperParams, valid: Dataset) -> float:
    """Unregularized MSE on held-out samples."""
    return model.mse(w, h, valid)


def reverse_hypergrad(final: TrainState, buf: ReversalBuffer, sched: Schedule, h: HyperParams,
                      train_data: Dataset, valid: Dataset, topology: Topology,
                      plan: BatchPlan | None = None) -> HypergradResult:
    """Differentiate the validation loss at the end of training through every step.

    ``final`` and ``buf`` must come from :func:`trainer.train` on the same
    inputs; the buffer is consumed. Alpha also reaches the validation loss
    directly through the predictions, so its adjoint starts from that
    partial rather than from zero.
    """
    T = sched.T
    if final.t != T + 1 or buf.steps != T:
        raise ReversalError(f"state at t={final.t} does not match a {T}-step buffer")
    vobj = Objective(topology, valid, h.eps, penalized=False)
    w_T = final.w
    valid_loss = vobj.value(w_T, h)
    dw = vobj.grad(w_T, h)
    dhyp = vobj.hyper_grad(w_T, h)
    dhyp[:2] = 0.0  # shrinkage never enters the validation loss
    dv = np.zeros_like(dw)
    d_eta = np.zeros(T)
    d_gamma = np.zeros(T)
    gamma = sched.quantized(buf.decay_bits).gamma
    objective = BatchedObjective(topology, train_data, h, plan)

    state = final
    for t in range(T, 0, -1):
        d_eta[t - 1] = dw @ state.v
        half = undo_position(state, sched, buf, objective.grad_fn)
        dv += sched.eta[t - 1] * dw
        _, g, hv, mixed = objective.at_step(t).grad_hvp(half.w, h, dv)
        state = undo_velocity(half, g, sched, buf)
        d_gamma[t - 1] = dv @ (state.v + g)
        dw -= (1.0 - gamma[t - 1]) * hv
        dhyp -= (1.0 - gamma[t - 1]) * mixed
        dv *= gamma[t - 1]

    acc = np.concatenate([dhyp, d_eta, d_gamma])
    if not np.isfinite(acc).all():
        raise NumericalError("non-finite hypergradient accumulator")
    return HypergradResult(float(dhyp[0]), float(dhyp[1]), float(dhyp[2]), d_eta, d_gamma, valid_loss)


def pipeline_loss(h: HyperParams, w_init: Weights, sched: Schedule, train_data: Dataset, valid: Dataset,
                  plan: BatchPlan | None = None, mode: str = "checkpoint", decay_bits: int = 16) -> float:
    """Train from ``w_init`` and return the validation loss; the end-to-end map being differentiated."""
    state, _ = train(w_init, h, sched, train_data, plan, ReversalBuffer(mode=mode, decay_bits=decay_bits))
    return validation_loss(Weights.from_flat(w_init.topology, state.w), h, valid)


def hypergradient(h: HyperParams, w_init: Weights, sched: Schedule, train_data: Dataset, valid: Dataset,
                  plan: BatchPlan | None = None, buf: ReversalBuffer | None = None):
    """Train then reverse; returns ``(HypergradResult, trained weights)``."""
    buf = buf if buf is not None else ReversalBuffer()
    state, buf = train(w_init, h, sched, train_data, plan, buf)
    trained = Weights.from_flat(w_init.topology, state.w)
    res = reverse_hypergrad(state, buf, sched, h, train_data, valid, w_init.topology, plan)
    return res, trained


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

@dataclass
class MetaConfig:
    meta_iters: int = 10
    meta_rate: float = 100.0
    targets: tuple = HYPER_NAMES
    valid_fraction: float = 0.2
    max_step: float = 1.0
    learn_schedule: bool = False
    mode: str = "exact"
    backtrack: bool = True
    transforms: bool = True

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.meta_iters < 0:
            raise ValidationError("meta_iters must be >= 0")
        if self.meta_rate < 0:
            raise ValidationError("meta_rate must be >= 0")
        if not self.targets or any(t not in HYPER_NAMES for t in self.targets):
            raise ValidationError(f"targets must be a nonempty subset of {HYPER_NAMES}")
        if not 0 < self.valid_fraction < 1:
            raise ValidationError("valid_fraction must lie in (0, 1)")


@dataclass
class MetaResult:
    hyper: HyperParams
    history: list = field(default_factory=list)
    weights: Weights | None = None
    sched: Schedule | None = None

    def __iter__(self):
        # allows ``h, history = meta_optimize(...)``
        return iter((self.hyper, self.history))


def split_train_valid(data: Dataset, valid_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Time-ordered split: the last ``valid_fraction`` of rows validate."""
    n = len(data)
    n_valid = max(1, int(round(n * valid_fraction)))
    if n_valid >= n:
        raise ValidationError("too few rows to split off a validation set")
    return data.rows(slice(0, n - n_valid)), data.rows(slice(n - n_valid, n))


def meta_optimize(cfg: MetaConfig, h0: HyperParams, train_data: Dataset, valid: Dataset, sched: Schedule,
                  topology: Topology, seed: int = 0, w_init: Weights | None = None,
                  plan: BatchPlan | None = None, log_fh: TextIO | None = None,
                  callback: Callable[[dict], None] | None = None) -> MetaResult:
    """Gradient descent on ``(log lam1, log lam2, logit alpha)`` with best-iterate memory.

    Every iteration trains from the same initial weights, so the validation
    loss is a deterministic function of the hyperparameters. Each coordinate
    step is clipped to ``cfg.max_step``. With ``cfg.backtrack`` an iterate that
    fails to improve on the best one halves the rate and the next step is
    taken again from the best point.

    ``cfg.transforms = False`` steps the raw values instead, clamping them
    back into their domains.
    """
    if w_init is None:
        w_init = model.init_weights(topology, seed, alpha=h0.alpha)
    mask = np.array([name in cfg.targets for name in HYPER_NAMES], dtype=float)
    h = h0
    rate = cfg.meta_rate
    best = None
    anchor = None  # (coordinates, gradient, schedule) the next step starts from
    history = []
    for it in range(cfg.meta_iters + 1):
        try:
            res, trained = hypergradient(h, w_init, sched, train_data, valid, plan, ReversalBuffer(mode=cfg.mode))
            loss = res.valid_loss
        except NumericalError as exc:
            log.warning("meta iteration %d diverged: %s", it, exc)
            break
        if not math.isfinite(loss):
            break
        accepted = best is None or loss < best[0]
        grad = (res.theta_grad(h) if cfg.transforms else res.vector()) * mask
        rec = {
            "iteration": it, "lam1": h.lam1, "lam2": h.lam2, "alpha": h.alpha, "valid_loss": loss,
            "grad_norm": float(np.linalg.norm(grad)),
            "d_lam1": res.d_lam1, "d_lam2": res.d_lam2, "d_alpha": res.d_alpha,
            "d_eta_norm": float(np.linalg.norm(res.d_eta)), "d_gamma_norm": float(np.linalg.norm(res.d_gamma)),
            "accepted": accepted, "meta_rate": rate,
        }
        history.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
        if callback is not None:
            callback(rec)
        if accepted:
            best = (loss, h, trained, sched)
            anchor = (_coords(h, cfg.transforms), grad, res, sched)
        elif cfg.backtrack:
            rate *= 0.5
        if it == cfg.meta_iters:
            break
        base, g, base_res, base_sched = anchor if cfg.backtrack else (_coords(h, cfg.transforms), grad, res, sched)
        step = np.clip(rate * g, -cfg.max_step, cfg.max_step)
        h = _from_coords(base - step, h0.eps, cfg.transforms)
        if cfg.learn_schedule:
            sched = _step_schedule(base_sched, base_res, rate, cfg.max_step)
    if best is None:
        return MetaResult(h0, history, None, sched)
    return MetaResult(best[1], history, best[2], best[3])


def _coords(h: HyperParams, transforms: bool) -> np.ndarray:
    return h.theta() if transforms else np.array([h.lam1, h.lam2, h.alpha])


def _from_coords(x, eps: float, transforms: bool) -> HyperParams:
    if transforms:
        return HyperParams.from_theta(x, eps)
    return HyperParams(max(float(x[0]), 0.0), max(float(x[1]), 0.0), float(np.clip(x[2], 0.0, 1.0)), eps)


def _step_schedule(sched: Schedule, res: HypergradResult, rate: float, max_step: float) -> Schedule:
    log_eta = np.log(sched.eta) - np.clip(rate * sched.eta * res.d_eta, -max_step, max_step)
    g = sched.gamma
    logit_g = np.log(g / (1 - g)) - np.clip(rate * g * (1 - g) * res.d_gamma, -max_step, max_step)
    return Schedule(np.exp(log_eta), np.clip(1 / (1 + np.exp(-logit_g)), 1e-3, 1 - 1e-3))
