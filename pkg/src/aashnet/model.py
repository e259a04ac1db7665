"""Skip-layer network with L1 (dense) and L2 (skip) shrinkage.

The prediction mixes a linear skip path and a one-hidden-layer dense path::

    y_hat = alpha * x @ skip + (1 - alpha) * phi(x @ W.T) @ v

When ``include_bias`` is set a constant 1 is appended to ``x``; the weights
attached to it are never penalized.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from . import adcore as ad
from .errors import NonFiniteError, ShapeError, ValidationError

ACTIVATIONS = ("tanh", "logistic")
WEIGHTS_FORMAT = "aashnet-weights/1"


@dataclass(frozen=True)
class Topology:
    m: int
    hidden: int = 5
    activation: str = "tanh"
    include_bias: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError("topology needs m >= 1")
        if self.hidden < 0:
            raise ValidationError("topology needs hidden >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.m + int(self.include_bias)

    @property
    def n_weights(self) -> int:
        return self.n_in + self.hidden * self.n_in + self.hidden

    def skip_mask(self) -> np.ndarray:
        mask = np.ones(self.n_in)
        if self.include_bias:
            mask[-1] = 0.0
        return mask

    def hidden_mask(self) -> np.ndarray:
        return np.tile(self.skip_mask(), (self.hidden, 1))


@dataclass
class Weights:
    topology: Topology
    skip: np.ndarray
    input_hidden: np.ndarray
    hidden_out: np.ndarray

    def __post_init__(self):
        t = self.topology
        for name, shape in (("skip", (t.n_in,)), ("input_hidden", (t.hidden, t.n_in)),
                            ("hidden_out", (t.hidden,))):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.size != int(np.prod(shape)):
                raise ShapeError(f"{name} has shape {a.shape}, expected {shape}")
            setattr(self, name, a.reshape(shape))

    @classmethod
    def zeros(cls, topology: Topology) -> "Weights":
        return cls.from_flat(topology, np.zeros(topology.n_weights))

    @classmethod
    def from_flat(cls, topology: Topology, flat) -> "Weights":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (topology.n_weights,):
            raise ShapeError(f"expected {topology.n_weights} weights, got shape {flat.shape}")
        a = topology.n_in
        b = a + topology.hidden * topology.n_in
        return cls(topology, flat[:a].copy(), flat[a:b].copy(), flat[b:].copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.skip, self.input_hidden.ravel(), self.hidden_out])

    def dense_flat(self) -> np.ndarray:
        """Penalized dense-path weights (hidden biases excluded)."""
        mask = self.topology.hidden_mask().astype(bool)
        return np.concatenate([self.input_hidden[mask], self.hidden_out])

    def copy(self) -> "Weights":
        return Weights.from_flat(self.topology, self.flat())

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        t = self.topology
        return {
            "format": WEIGHTS_FORMAT,
            "topology": {"m": t.m, "hidden": t.hidden, "activation": t.activation,
                         "include_bias": t.include_bias},
            "skip": self.skip.tolist(),
            "input_hidden": self.input_hidden.tolist(),
            "hidden_out": self.hidden_out.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Weights":
        if doc.get("format") != WEIGHTS_FORMAT:
            raise ValidationError(f"not a weights document (format={doc.get('format')!r})")
        t = Topology(**doc["topology"])
        return cls(t, doc["skip"], np.asarray(doc["input_hidden"], dtype=np.float64).reshape(t.hidden, t.n_in),
                   doc["hidden_out"])

    def to_json(self, **extra) -> str:
        # json writes floats with repr(), the shortest string that round-trips
        return json.dumps({**self.to_dict(), **extra}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Weights":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class HyperParams:
    lam1: float = 1e-3
    lam2: float = 1e-3
    alpha: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValidationError("shrinkage strengths must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        if not self.eps > 0:
            raise ValidationError("eps must be positive")

    def theta(self) -> np.ndarray:
        """Unconstrained coordinates ``(log lam1, log lam2, logit alpha)``."""
        with np.errstate(divide="ignore"):
            return np.array([np.log(self.lam1), np.log(self.lam2), logit(self.alpha)])

    @classmethod
    def from_theta(cls, theta, eps: float = 1e-6) -> "HyperParams":
        t1, t2, ta = (float(x) for x in theta)
        return cls(float(np.exp(t1)), float(np.exp(t2)), float(expit(ta)), eps)

    def dtheta(self) -> np.ndarray:
        """``d(lam1, lam2, alpha) / d theta`` (diagonal)."""
        return np.array([self.lam1, self.lam2, self.alpha * (1.0 - self.alpha)])

    def replace(self, **kw) -> "HyperParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    @classmethod
    def of(cls, X, y) -> "Dataset":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ShapeError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValidationError("data contains non-finite entries")
        return cls(X, y)

    @classmethod
    def from_samples(cls, samples: Sequence[tuple]) -> "Dataset":
        xs, ys = zip(*samples)
        return cls.of(np.vstack(xs), np.asarray(ys))

    def __len__(self):
        return self.y.shape[0]

    def rows(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx])


@dataclass
class Standardizer:
    """Column z-scoring with parameters frozen at fit time."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        if X.shape[0]:
            # the float mean of a constant column can miss its value by an ulp
            mean = np.where(np.ptp(X, axis=0) == 0, X[0], mean)
        sd = X.std(axis=0)
        # constant columns map to zero instead of dividing by 0
        scale = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mean)), sd, 1.0)
        return cls(mean, scale)

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean) / self.scale

    def inverse(self, Z) -> np.ndarray:
        return np.asarray(Z) * self.scale + self.mean


def init_weights(topology: Topology, seed: int | np.random.Generator = 0, alpha: float = 0.5) -> Weights:
    """Gaussian init, sd = 1/sqrt(fan_in), with the alpha mixing undone per block.

    At the default ``alpha = 0.5`` both output-facing blocks are doubled so the
    initial network has the scale of the unmixed skip-layer model.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t = topology
    skip = rng.normal(0.0, 1.0 / np.sqrt(t.n_in), t.n_in)
    w_ih = rng.normal(0.0, 1.0 / np.sqrt(t.n_in), (t.hidden, t.n_in))
    w_ho = rng.normal(0.0, 1.0 / np.sqrt(max(t.hidden, 1)), t.hidden)
    if alpha > 0:
        skip = skip / alpha
    if alpha < 1:
        w_ho = w_ho / (1.0 - alpha)
    return Weights(t, skip, w_ih, w_ho)


# ---------------------------------------------------------------------------
# Direct (numpy) evaluation
# ---------------------------------------------------------------------------

def _design(topology: Topology, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != topology.m:
        raise ShapeError(f"expected {topology.m} predictors, got {x.shape[-1]}")
    if topology.include_bias:
        ones = np.ones(x.shape[:-1] + (1,))
        x = np.concatenate([x, ones], axis=-1)
    return x


def _activate(kind, z):
    return np.tanh(z) if kind == "tanh" else expit(z)


def linear_term(w: Weights, x) -> np.ndarray:
    return _design(w.topology, x) @ w.skip


def dense_term(w: Weights, x) -> np.ndarray:
    xb = _design(w.topology, x)
    if w.topology.hidden == 0:
        return np.zeros(xb.shape[:-1])
    return _activate(w.topology.activation, xb @ w.input_hidden.T) @ w.hidden_out


def predict(w: Weights, h: HyperParams, x):
    """Network output for one predictor vector (scalar) or a matrix of rows."""
    out = h.alpha * linear_term(w, x) + (1.0 - h.alpha) * dense_term(w, x)
    return float(out) if np.ndim(out) == 0 else out


def mse(w: Weights, h: HyperParams, data: Dataset) -> float:
    if len(data) == 0:
        raise ValidationError("mse of an empty sample")
    r = data.y - predict(w, h, data.X)
    return float(np.mean(r * r))


def penalty(w: Weights, h: HyperParams) -> float:
    t = w.topology
    l2 = 0.5 * h.lam2 * np.sum((w.skip * t.skip_mask()) ** 2)
    sabs = np.sum(np.sqrt(w.input_hidden ** 2 + h.eps) * t.hidden_mask()) + np.sum(np.sqrt(w.hidden_out ** 2 + h.eps))
    return float(l2 + h.lam1 * sabs)


def regularized_loss(w: Weights, h: HyperParams, data: Dataset) -> float:
    return mse(w, h, data) + penalty(w, h)


# ---------------------------------------------------------------------------
# Tape-backed objective
# ---------------------------------------------------------------------------

class Objective:
    """Training (penalized) or validation (plain MSE) loss recorded on a tape.

    Tape inputs are ``skip, input_hidden, hidden_out, alpha, lam1, lam2, X, y``;
    the data inputs carry no gradient. One tape serves every evaluation, so
    the graph is built once per objective.
    """

    N_HYPER = 3

    def __init__(self, topology: Topology, data: Dataset, eps: float = 1e-6, penalized: bool = True):
        self.topology = topology
        self.eps = float(eps)
        self.penalized = penalized
        self.set_data(data)
        self._tape = None

    def set_data(self, data: Dataset):
        if len(data) == 0:
            raise ValidationError("objective needs at least one sample")
        self.data = data
        self._Xb = _design(self.topology, data.X)

    def _inputs(self, w_flat, h: HyperParams):
        w = Weights.from_flat(self.topology, w_flat)
        return [w.skip, w.input_hidden, w.hidden_out, h.alpha, h.lam1, h.lam2, self._Xb, self.data.y]

    def _build(self, at):
        t = self.topology
        eps = self.eps
        penalized = self.penalized

        def graph(skip, w_ih, w_ho, alpha, lam1, lam2, X, y):
            pred = alpha * (X @ skip)
            if t.hidden > 0:
                act = ad.tanh if t.activation == "tanh" else ad.logistic
                hid = act(X @ w_ih.T)
                pred = pred + (1.0 - alpha) * (hid @ w_ho)
            loss = ad.mean(ad.square(y - pred))
            if penalized:
                loss = loss + lam2 * (0.5 * ad.reduce_sum(ad.square(skip * t.skip_mask())))
                if t.hidden > 0:
                    dense = (ad.reduce_sum(ad.smooth_abs(w_ih, eps) * t.hidden_mask())
                             + ad.reduce_sum(ad.smooth_abs(w_ho, eps)))
                    loss = loss + lam1 * dense
            return loss

        return ad.record(graph, *at, requires_grad=[True] * 6 + [False, False])

    def tape(self, w_flat, h):
        at = self._inputs(w_flat, h)
        if self._tape is None:
            self._tape = self._build(at)
        return self._tape, at

    def value(self, w_flat, h: HyperParams) -> float:
        tape, at = self.tape(w_flat, h)
        return float(tape.evaluate(at)[tape.output])

    def _split(self, parts):
        return np.concatenate([np.ravel(parts[0]), np.ravel(parts[1]), np.ravel(parts[2])])

    def grad(self, w_flat, h: HyperParams) -> np.ndarray:
        tape, at = self.tape(w_flat, h)
        g = self._split(ad.reverse_grad(tape, at))
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient")
        return g

    def hyper_grad(self, w_flat, h: HyperParams) -> np.ndarray:
        """Gradient with respect to ``(lam1, lam2, alpha)`` at fixed weights."""
        tape, at = self.tape(w_flat, h)
        g = ad.reverse_grad(tape, at)
        return np.array([float(g[4]), float(g[5]), float(g[3])])

    def grad_hvp(self, w_flat, h: HyperParams, direction):
        """One forward-over-reverse sweep.

        Returns ``(value, grad, H @ direction, mixed)`` where ``mixed`` holds
        ``direction . d(grad_w)/d(lam1, lam2, alpha)``.
        """
        tape, at = self.tape(w_flat, h)
        d = Weights.from_flat(self.topology, direction)
        vec = [d.skip, d.input_hidden, d.hidden_out] + [None] * 5
        value, g, hv = ad.grad_and_hvp(tape, at, vec)
        mixed = np.array([float(hv[4]), float(hv[5]), float(hv[3])])
        return value, self._split(g), self._split(hv), mixed


def grad_w(w: Weights, h: HyperParams, data: Dataset) -> Weights:
    """Gradient of the penalized training loss with respect to every weight."""
    obj = Objective(w.topology, data, h.eps)
    return Weights.from_flat(w.topology, obj.grad(w.flat(), h))


def mixed_partial_vec(w: Weights, h: HyperParams, data: Dataset, v: Weights) -> np.ndarray:
    """``(v . d grad_w / d lam1, v . d grad_w / d lam2, v . d grad_w / d alpha)``.

    The shrinkage terms enter the gradient linearly and are written out; alpha
    reaches it only through the predictions and goes through the tape.
    """
    t = w.topology
    if v.topology != t:
        raise ShapeError("direction topology differs from the weights")
    d_lam2 = float(np.sum(v.skip * w.skip * t.skip_mask()))
    sgn = lambda a: a / np.sqrt(a * a + h.eps)  # noqa: E731
    d_lam1 = float(np.sum(v.input_hidden * sgn(w.input_hidden) * t.hidden_mask())
                   + np.sum(v.hidden_out * sgn(w.hidden_out)))
    obj = Objective(t, data, h.eps, penalized=False)
    _, _, _, mixed = obj.grad_hvp(w.flat(), h, v.flat())
    return np.array([d_lam1, d_lam2, mixed[2]])
