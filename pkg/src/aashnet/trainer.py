"""Momentum SGD whose trajectory can be run backwards.

Forward recurrence, for t = 1..T::

    g_t     = grad L_train(w_t, batch t)
    v_{t+1} = gamma_t * v_t - (1 - gamma_t) * g_t
    w_{t+1} = w_t + eta_t * v_{t+1}

Two ways to walk it back:

* ``exact``: w and v live on a fixed-point grid (int64, ``frac_bits``
  fractional bits). ``gamma_t`` is the rational ``num_t / 2**decay_bits`` and
  the low bits that the multiplication throws away go on a stack, so every
  reverse step restores the forward state bit for bit.
* ``checkpoint``: plain float64, with a snapshot every ``checkpoint_every``
  steps; reversal recomputes forward from the nearest snapshot.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np

from . import kernels
from .errors import FixedPointOverflowError, NonFiniteError, ReversalError, ValidationError
from .model import Dataset, HyperParams, Objective, Weights

GradFn = Callable[[np.ndarray, int], np.ndarray]

MODES = ("exact", "checkpoint")
TRAJ_MAGIC = b"AASHTRJ1"


@dataclass
class Schedule:
    eta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.float64).reshape(-1)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        if self.eta.shape != self.gamma.shape:
            raise ValidationError("eta and gamma schedules differ in length")
        if np.any(self.eta <= 0):
            raise ValidationError("learning rates must be positive")
        if np.any((self.gamma <= 0) | (self.gamma >= 1)):
            raise ValidationError("momentum decays must lie in (0, 1)")

    @classmethod
    def constant(cls, T: int, eta: float = 0.1, gamma: float = 0.9) -> "Schedule":
        return cls(np.full(T, eta), np.full(T, gamma))

    @property
    def T(self) -> int:
        return self.eta.shape[0]

    def decay_numerators(self, decay_bits: int) -> np.ndarray:
        num = np.rint(self.gamma * 2.0 ** decay_bits).astype(np.int64)
        if np.any((num <= 0) | (num >= 1 << decay_bits)):
            raise ValidationError(f"gamma not representable with {decay_bits} decay bits")
        return num

    def quantized(self, decay_bits: int = 16) -> "Schedule":
        """Same schedule with gamma rounded to the ``num / 2**decay_bits`` grid."""
        return Schedule(self.eta.copy(), self.decay_numerators(decay_bits) / 2.0 ** decay_bits)

    def digest(self) -> str:
        return hashlib.sha1(self.eta.tobytes() + self.gamma.tobytes()).hexdigest()


@dataclass(frozen=True)
class BatchPlan:
    """Minibatch indices as a pure function of ``(seed, t)``; ``None`` = full batch."""

    seed: int = 0
    batch_size: int | None = None

    def indices(self, t: int, n: int):
        if self.batch_size is None or self.batch_size >= n:
            return None
        rng = np.random.default_rng([self.seed, t])
        return np.sort(rng.choice(n, self.batch_size, replace=False))


@dataclass
class TrainState:
    t: int
    w: np.ndarray
    v: np.ndarray
    wq: np.ndarray | None = None  # fixed-point words (exact mode)
    vq: np.ndarray | None = None


@dataclass
class ReversalBuffer:
    mode: str = "exact"
    frac_bits: int = 40
    decay_bits: int = 16
    checkpoint_every: int = 10
    bitstack: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    pushes: int = 0
    pops: int = 0
    steps: int = 0
    schedule_digest: str | None = None
    initial_digest: str | None = None
    _segment: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown reversal mode {self.mode!r}")
        if not 1 <= self.decay_bits <= 16:
            raise ValidationError("decay_bits must be in [1, 16]")
        if not 8 <= self.frac_bits <= 48:
            raise ValidationError("frac_bits must be in [8, 48]")
        if self.checkpoint_every < 1:
            raise ValidationError("checkpoint_every must be >= 1")

    @property
    def depth(self) -> int:
        """Remainders currently on the stack (one per coordinate per step)."""
        return sum(r.shape[0] for r in self.bitstack)

    @property
    def empty(self) -> bool:
        return not self.bitstack and not self.checkpoints and not self._segment

    def push(self, rem: np.ndarray):
        self.bitstack.append(rem)
        self.pushes += rem.shape[0]

    def pop(self) -> np.ndarray:
        if not self.bitstack:
            raise ReversalError("bit stack underflow")
        rem = self.bitstack.pop()
        self.pops += rem.shape[0]
        return rem

    def to_fixed(self, x) -> np.ndarray:
        return np.floor(np.asarray(x, dtype=np.float64) * 2.0 ** self.frac_bits + 0.5).astype(np.int64)

    def to_float(self, q) -> np.ndarray:
        return q * 2.0 ** -self.frac_bits


# ---------------------------------------------------------------------------
# Trajectory dump
# ---------------------------------------------------------------------------

def _dump_header(fh: BinaryIO, mode: str, n: int):
    fh.write(TRAJ_MAGIC + struct.pack("<BQ", MODES.index(mode), n))


def _dump_record(fh: BinaryIO, state: TrainState, mode: str):
    fh.write(struct.pack("<q", state.t))
    if mode == "exact":
        fh.write(state.wq.astype("<i8").tobytes())
        fh.write(state.vq.astype("<i8").tobytes())
    else:
        fh.write(state.w.astype("<f8").tobytes())
        fh.write(state.v.astype("<f8").tobytes())


def read_trajectory(source) -> tuple[str, np.ndarray, np.ndarray, np.ndarray]:
    """Parse a dump into ``(mode, steps, W, V)``; W and V have one row per record."""
    data = source if isinstance(source, bytes) else open(source, "rb").read()
    if data[:8] != TRAJ_MAGIC:
        raise ValidationError("not a trajectory dump")
    mode_ix, n = struct.unpack_from("<BQ", data, 8)
    mode = MODES[mode_ix]
    body = data[8 + 9:]
    rec = 8 * (1 + 2 * n)
    if len(body) % rec:
        raise ValidationError("truncated trajectory dump")
    words = np.frombuffer(body, dtype="<i8").reshape(-1, 1 + 2 * n)
    steps = words[:, 0].copy()
    W, V = words[:, 1:1 + n].copy(), words[:, 1 + n:].copy()
    if mode == "checkpoint":
        W, V = W.view("<f8"), V.view("<f8")
    return mode, steps, W, V


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _digest(q):
    return hashlib.sha1(np.ascontiguousarray(q).tobytes()).hexdigest()


def _check_status(status, t):
    if status == kernels.OVERFLOW:
        raise FixedPointOverflowError(t)
    if status == kernels.CORRUPT:
        raise ReversalError(f"remainder mismatch while undoing step {t}")


def _grad(grad_fn, w, t):
    g = np.asarray(grad_fn(w, t), dtype=np.float64)
    if not np.isfinite(g).all():
        raise NonFiniteError(f"non-finite gradient at step {t}")
    return g


def run(grad_fn: GradFn, w_init, sched: Schedule, buf: ReversalBuffer | None = None,
        dump: BinaryIO | None = None, on_step: Callable | None = None) -> TrainState:
    """Run the momentum recurrence from ``w_init`` with ``v_1 = 0``.

    Returns the state after the last step (``t = T + 1``); ``buf`` is left
    ready for :func:`step_reverse`.
    """
    buf = buf if buf is not None else ReversalBuffer()
    if not buf.empty or buf.steps:
        raise ReversalError("reversal buffer must be empty before training")
    T = sched.T
    buf.steps = T
    buf.schedule_digest = sched.digest()
    w0 = np.asarray(w_init, dtype=np.float64).reshape(-1)
    n = w0.shape[0]
    if buf.mode == "exact":
        return _run_exact(grad_fn, w0, sched, buf, dump, on_step)

    w, v = w0.copy(), np.zeros(n)
    K = buf.checkpoint_every
    gamma = sched.quantized(buf.decay_bits).gamma
    if dump is not None:
        _dump_header(dump, "checkpoint", n)
        _dump_record(dump, TrainState(1, w, v), "checkpoint")
    for t in range(1, T + 1):
        if (t - 1) % K == 0:
            buf.checkpoints[t] = (w.copy(), v.copy())
        g = _grad(grad_fn, w, t)
        v = gamma[t - 1] * v - (1.0 - gamma[t - 1]) * g
        w = w + sched.eta[t - 1] * v
        if dump is not None:
            _dump_record(dump, TrainState(t + 1, w, v), "checkpoint")
        if on_step is not None:
            on_step(t, w, g)
    return TrainState(T + 1, w, v)


def _run_exact(grad_fn, w0, sched, buf, dump, on_step):
    n = w0.shape[0]
    S, B = buf.frac_bits, buf.decay_bits
    num = sched.decay_numerators(B)
    wq = buf.to_fixed(w0)
    vq = np.zeros(n, dtype=np.int64)
    buf.initial_digest = _digest(wq)
    rem_dtype = np.uint16
    if dump is not None:
        _dump_header(dump, "exact", n)
        _dump_record(dump, TrainState(1, buf.to_float(wq), buf.to_float(vq), wq, vq), "exact")
    for t in range(1, sched.T + 1):
        w = buf.to_float(wq)
        g = _grad(grad_fn, w, t)
        rem = np.empty(n, dtype=rem_dtype)
        _check_status(kernels.fxp_forward(wq, vq, g, sched.eta[t - 1], num[t - 1], B, S, rem), t)
        buf.push(rem)
        if dump is not None:
            _dump_record(dump, TrainState(t + 1, None, None, wq, vq), "exact")
        if on_step is not None:
            on_step(t, w, g)
    return TrainState(sched.T + 1, buf.to_float(wq), buf.to_float(vq), wq.copy(), vq.copy())


# ---------------------------------------------------------------------------
# Reverse
# ---------------------------------------------------------------------------

def _check_reversible(state: TrainState, sched: Schedule, buf: ReversalBuffer):
    if buf.schedule_digest != sched.digest():
        raise ReversalError("schedule differs from the one used for training")
    if not 2 <= state.t <= sched.T + 1:
        raise ReversalError(f"no step to undo from t={state.t}")


def undo_position(state: TrainState, sched: Schedule, buf: ReversalBuffer,
                  grad_fn: GradFn | None = None) -> TrainState:
    """Undo ``w_{t+1} = w_t + eta_t v_{t+1}``; the result holds ``(w_t, v_{t+1})``."""
    _check_reversible(state, sched, buf)
    t = state.t - 1
    if buf.mode == "exact":
        if state.wq is None:
            raise ReversalError("exact-mode reversal needs the fixed-point state")
        wq, vq = state.wq.copy(), state.vq.copy()
        _check_status(kernels.fxp_reverse_position(wq, vq, sched.eta[t - 1], buf.frac_bits), t)
        return TrainState(t, buf.to_float(wq), state.v, wq, vq)
    w_t, _ = _segment_state(t, sched, buf, grad_fn)
    return TrainState(t, w_t, state.v)


def undo_velocity(state: TrainState, g: np.ndarray, sched: Schedule, buf: ReversalBuffer) -> TrainState:
    """Undo the velocity update given ``g_t`` evaluated at the recovered ``w_t``."""
    t = state.t
    if buf.mode == "exact":
        vq = state.vq.copy()
        rem = buf.pop()
        if rem.shape != vq.shape:
            raise ReversalError("buffer entry does not match the state size")
        num = sched.decay_numerators(buf.decay_bits)[t - 1]
        _check_status(kernels.fxp_reverse_velocity(vq, np.asarray(g, dtype=np.float64), num,
                                                   buf.decay_bits, buf.frac_bits, rem), t)
        if t == 1:
            if np.any(vq) or _digest(state.wq) != buf.initial_digest:
                raise ReversalError("reversal did not reproduce the initial state")
            buf.steps = 0
        return TrainState(t, state.w, buf.to_float(vq), state.wq, vq)
    entry = buf._segment.pop(t, None)
    if entry is None:
        raise ReversalError(f"checkpoint miss at step {t}")
    if t in buf.checkpoints:
        del buf.checkpoints[t]
    if t == 1:
        buf.steps = 0
    return TrainState(t, entry[0], entry[1])


def _segment_state(t, sched, buf, grad_fn):
    if t not in buf._segment:
        K = buf.checkpoint_every
        c = ((t - 1) // K) * K + 1
        if c not in buf.checkpoints:
            raise ReversalError(f"checkpoint miss at step {t}")
        if grad_fn is None:
            raise ReversalError("checkpoint-mode reversal needs the gradient function")
        gamma = sched.quantized(buf.decay_bits).gamma
        w, v = (a.copy() for a in buf.checkpoints[c])
        buf._segment.clear()
        for s in range(c, min(c + K, sched.T + 1)):
            buf._segment[s] = (w, v)
            if s == t:
                break
            g = _grad(grad_fn, w, s)
            v = gamma[s - 1] * v - (1.0 - gamma[s - 1]) * g
            w = w + sched.eta[s - 1] * v
    return buf._segment[t]


def step_reverse(state: TrainState, grad_fn: GradFn, sched: Schedule, buf: ReversalBuffer) -> TrainState:
    """Recover the state one step earlier."""
    half = undo_position(state, sched, buf, grad_fn)
    g = _grad(grad_fn, half.w, half.t) if buf.mode == "exact" else None
    return undo_velocity(half, g, sched, buf)


def reverse_all(state: TrainState, grad_fn: GradFn, sched: Schedule, buf: ReversalBuffer) -> TrainState:
    while state.t > 1:
        state = step_reverse(state, grad_fn, sched, buf)
    return state


# ---------------------------------------------------------------------------
# Network training
# ---------------------------------------------------------------------------

class BatchedObjective:
    """Training objective whose batch for step ``t`` comes from a :class:`BatchPlan`."""

    def __init__(self, topology, data: Dataset, h: HyperParams, plan: BatchPlan | None = None,
                 penalized: bool = True):
        self.data = data
        self.h = h
        self.plan = plan or BatchPlan()
        self.obj = Objective(topology, data, h.eps, penalized=penalized)

    def at_step(self, t: int) -> Objective:
        idx = self.plan.indices(t, len(self.data))
        self.obj.set_data(self.data if idx is None else self.data.rows(idx))
        return self.obj

    def grad_fn(self, w, t):
        return self.at_step(t).grad(w, self.h)


def train(w_init: Weights, h: HyperParams, sched: Schedule, data: Dataset,
          plan: BatchPlan | None = None, buf: ReversalBuffer | None = None,
          dump: BinaryIO | None = None, loss_log: list | None = None) -> tuple[TrainState, ReversalBuffer]:
    """Train the network on ``data``; returns the final state and the filled buffer.

    ``loss_log``, when given, collects the full-batch penalized loss at
    ``w_t`` for every step ``t``.
    """
    buf = buf if buf is not None else ReversalBuffer()
    objective = BatchedObjective(w_init.topology, data, h, plan)
    on_step = None
    if loss_log is not None:
        full = Objective(w_init.topology, data, h.eps)

        def on_step(t, w, g):
            loss_log.append(full.value(w, h))

    state = run(objective.grad_fn, w_init.flat(), sched, buf, dump=dump, on_step=on_step)
    return state, buf

