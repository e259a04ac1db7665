"""Derivative checks against finite differences, shared by ``gradcheck`` and the tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adcore as ad
from . import hypergrad, model
from .model import Dataset, HyperParams, Objective, Topology, Weights
from .trainer import ReversalBuffer, Schedule

EXAMPLE_POINT = (6.0, 3.0)
EXAMPLE_ROUNDED = (17.04, 2.72, 6.0)


def example_function(x1, x2):
    return x1 * x2 - ad.cos(x1)


@dataclass
class ExampleResult:
    primal: float
    tangent_x1: float
    tangent_x2: float
    grad: tuple
    table: str


def worked_example() -> ExampleResult:
    tape = ad.record(example_function, *EXAMPLE_POINT)
    primal = float(tape.values[tape.output])
    t1 = float(ad.forward_tangent(tape, [1.0, 0.0]))
    t2 = float(ad.forward_tangent(tape, [0.0, 1.0]))
    g = tuple(float(v) for v in ad.reverse_grad(tape))
    return ExampleResult(primal, t1, t2, g, ad.trace_table(tape, [1.0, 0.0]))


def central_diff(f, x, rel: float = 1e-6) -> np.ndarray:
    """Central differences with step ``rel * max(1, |x_i|)`` per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        h = rel * max(1.0, abs(x.flat[i]))
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return out


def rel_error(a, b) -> float:
    """``max|a - b| / max|b|``, guarded against an all-zero reference."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b), initial=0.0)), 1e-12)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def random_problem(rng: np.random.Generator, max_m: int = 10, max_hidden: int = 5):
    """Random topology, weights, hyperparameters and data, for oracle checks."""
    m = int(rng.integers(1, max_m + 1))
    J = int(rng.integers(0, max_hidden + 1))
    act = "tanh" if rng.random() < 0.5 else "logistic"
    topo = Topology(m, J, act)
    n = int(rng.integers(5, 31))
    X = rng.normal(size=(n, m))
    y = rng.normal(size=n)
    h = HyperParams(float(10 ** rng.uniform(-4, -1)), float(10 ** rng.uniform(-4, -1)),
                    float(rng.uniform(0.1, 0.9)), 1e-6)
    w = model.init_weights(topo, rng, alpha=0.5)
    return topo, w, h, Dataset.of(X, y)


def grad_check(rng: np.random.Generator, trials: int = 50) -> list[float]:
    errs = []
    for _ in range(trials):
        topo, w, h, data = random_problem(rng)
        g = model.grad_w(w, h, data).flat()

        def f(flat):
            return model.regularized_loss(Weights.from_flat(topo, flat), h, data)

        errs.append(rel_error(g, central_diff(f, w.flat())))
    return errs


def hvp_check(rng: np.random.Generator, trials: int = 20, step: float = 1e-7) -> list[float]:
    errs = []
    for _ in range(trials):
        topo, w, h, data = random_problem(rng)
        obj = Objective(topo, data, h.eps)
        wf = w.flat()
        v = rng.normal(size=wf.shape)
        _, _, hv, _ = obj.grad_hvp(wf, h, v)
        fd = (obj.grad(wf + step * v, h) - obj.grad(wf - step * v, h)) / (2 * step)
        errs.append(rel_error(hv, fd))
    return errs


def hypergrad_check(seed: int = 0, m: int = 5, hidden: int = 3, n_train: int = 50, n_valid: int = 20,
                    T: int = 100, rel_step: float = 1e-4, h0: HyperParams | None = None,
                    eta: float = 0.1, gamma: float = 0.9) -> dict:
    """Reverse hypergradient against central differences of train-then-validate.

    Returns ``{name: (reverse, finite difference, relative error)}``.
    """
    rng = np.random.default_rng(seed)
    topo = Topology(m, hidden)
    X = rng.normal(size=(n_train + n_valid, m))
    y = np.tanh(X @ rng.normal(size=m)) + 0.1 * rng.normal(size=n_train + n_valid)
    tr = Dataset.of(X[:n_train], y[:n_train])
    va = Dataset.of(X[n_train:], y[n_train:])
    h = h0 or HyperParams(0.02, 0.05, 0.5)
    w0 = model.init_weights(topo, rng, alpha=0.5)
    sched = Schedule.constant(T, eta, gamma)
    res, _ = hypergrad.hypergradient(h, w0, sched, tr, va, buf=ReversalBuffer(mode="exact"))
    out = {}
    for name, rev in zip(hypergrad.HYPER_NAMES, res.vector()):
        x = getattr(h, name)
        d = rel_step * x
        lp = hypergrad.pipeline_loss(h.replace(**{name: x + d}), w0, sched, tr, va)
        lm = hypergrad.pipeline_loss(h.replace(**{name: x - d}), w0, sched, tr, va)
        fd = (lp - lm) / (2 * d)
        out[name] = (float(rev), float(fd), abs(rev - fd) / max(abs(fd), 1e-12))
    return out
