import io

import numpy as np
import pytest

from aashnet import model, trainer
from aashnet.errors import FixedPointOverflowError, ReversalError, ValidationError
from aashnet.model import Dataset, HyperParams, Topology
from aashnet.trainer import BatchPlan, ReversalBuffer, Schedule, TrainState

MODES = ["exact", "checkpoint"]


def quad(center=0.0):
    return lambda w, t: 2.0 * (w - center)


@pytest.mark.parametrize("mode", MODES)
def test_single_step_hand_values(mode):
    sched = Schedule.constant(1, 0.1, 0.5)
    state = trainer.run(quad(), np.array([1.0]), sched, ReversalBuffer(mode))
    assert state.v[0] == pytest.approx(-1.0, abs=1e-10)
    assert state.w[0] == pytest.approx(0.9, abs=1e-10)


@pytest.mark.parametrize("mode", MODES)
def test_single_step_unquantized_gamma(mode):
    # 0.9 is not on the 2**-16 grid; the result moves by at most that rounding
    state = trainer.run(quad(), np.array([1.0]), Schedule.constant(1, 0.1, 0.9), ReversalBuffer(mode))
    assert state.v[0] == pytest.approx(-0.2, abs=1e-4)
    assert state.w[0] == pytest.approx(0.98, abs=1e-5)


@pytest.mark.parametrize("mode", MODES)
def test_zero_gradient_is_fixed_point(mode, rng):
    w0 = rng.normal(size=7)
    state = trainer.run(lambda w, t: np.zeros_like(w), w0, Schedule.constant(20), ReversalBuffer(mode))
    np.testing.assert_allclose(state.w, w0, atol=1e-12)
    assert np.all(state.v == 0)


@pytest.mark.parametrize("mode", MODES)
def test_quadratic_converges(mode):
    state = trainer.run(quad(3.0), np.array([0.0]), Schedule.constant(500, 0.1, 0.9), ReversalBuffer(mode))
    assert state.w[0] == pytest.approx(3.0, abs=1e-6)


def test_exact_one_step_roundtrip(rng):
    w0 = rng.normal(size=5)
    buf = ReversalBuffer("exact")
    sched = Schedule.constant(1, 0.2, 0.8)
    fwd = trainer.run(quad(1.0), w0, sched, buf)
    back = trainer.step_reverse(fwd, quad(1.0), sched, buf)
    assert back.t == 1
    np.testing.assert_array_equal(back.wq, buf.to_fixed(w0))
    assert np.all(back.vq == 0)
    assert buf.depth == 0


def _nonlinear_problem(rng, T=60):
    topo = Topology(4, 3)
    data = Dataset.of(rng.normal(size=(30, 4)), rng.normal(size=30))
    h = HyperParams(0.01, 0.02, 0.4)
    w0 = model.init_weights(topo, rng)
    obj = trainer.BatchedObjective(topo, data, h)
    return obj.grad_fn, w0.flat(), Schedule(rng.uniform(0.05, 0.2, T), rng.uniform(0.5, 0.95, T))


def test_exact_full_reversal_bit_identical(rng):
    grad_fn, w0, sched = _nonlinear_problem(rng)
    buf = ReversalBuffer("exact")
    seen = {}
    fwd = trainer.run(grad_fn, w0, sched, buf)
    state = fwd
    while state.t > 1:
        seen[state.t] = state
        state = trainer.step_reverse(state, grad_fn, sched, buf)
    np.testing.assert_array_equal(state.wq, buf.to_fixed(w0))
    assert np.all(state.vq == 0)
    assert buf.pushes == buf.pops == sched.T * w0.size
    assert buf.depth == 0 and buf.steps == 0


def test_checkpoint_matches_forward_states(rng):
    grad_fn, w0, sched = _nonlinear_problem(rng, T=37)
    buf = ReversalBuffer("checkpoint", checkpoint_every=10)
    dump = io.BytesIO()
    fwd = trainer.run(grad_fn, w0, sched, buf, dump=dump)
    _, steps, W, V = trainer.read_trajectory(dump.getvalue())
    state = fwd
    while state.t > 1:
        state = trainer.step_reverse(state, grad_fn, sched, buf)
        np.testing.assert_array_equal(state.w, W[state.t - 1])
        np.testing.assert_array_equal(state.v, V[state.t - 1])
    np.testing.assert_array_equal(state.w, w0)


def test_exact_vs_checkpoint_close(rng):
    grad_fn, w0, sched = _nonlinear_problem(rng)
    a = trainer.run(grad_fn, w0, sched, ReversalBuffer("exact"))
    b = trainer.run(grad_fn, w0, sched, ReversalBuffer("checkpoint"))
    assert np.max(np.abs(a.w - b.w)) < 1e-8


def test_trajectory_dump_exact(rng):
    grad_fn, w0, sched = _nonlinear_problem(rng, T=5)
    buf = ReversalBuffer("exact")
    dump = io.BytesIO()
    fwd = trainer.run(grad_fn, w0, sched, buf, dump=dump)
    mode, steps, W, V = trainer.read_trajectory(dump.getvalue())
    assert mode == "exact"
    assert list(steps) == list(range(1, 7))
    np.testing.assert_array_equal(W[-1], fwd.wq)
    np.testing.assert_array_equal(V[0], 0)
    with pytest.raises(ValidationError):
        trainer.read_trajectory(dump.getvalue()[:-3])
    with pytest.raises(ValidationError):
        trainer.read_trajectory(b"garbage!" + dump.getvalue()[8:])


def test_deterministic(rng):
    grad_fn, w0, sched = _nonlinear_problem(rng)
    a = trainer.run(grad_fn, w0, sched, ReversalBuffer("exact"))
    b = trainer.run(grad_fn, w0, sched, ReversalBuffer("exact"))
    np.testing.assert_array_equal(a.wq, b.wq)


def test_underflow_and_misuse(rng):
    buf = ReversalBuffer("exact")
    with pytest.raises(ReversalError):
        buf.pop()
    sched = Schedule.constant(3)
    fwd = trainer.run(quad(), np.ones(2), sched, buf)
    with pytest.raises(ReversalError):
        trainer.run(quad(), np.ones(2), sched, buf)
    with pytest.raises(ReversalError):
        trainer.step_reverse(fwd, quad(), Schedule.constant(3, 0.2), buf)
    state = trainer.reverse_all(fwd, quad(), sched, buf)
    with pytest.raises(ReversalError):
        trainer.step_reverse(state, quad(), sched, buf)


def test_wrong_gradient_detected_or_diverges(rng):
    sched = Schedule.constant(10, 0.1, 0.9)
    buf = ReversalBuffer("exact")
    fwd = trainer.run(quad(), np.ones(3), sched, buf)
    with pytest.raises(ReversalError):
        trainer.reverse_all(fwd, quad(5.0), sched, buf)


def test_overflow_raises():
    with pytest.raises(FixedPointOverflowError):
        trainer.run(lambda w, t: np.full_like(w, -1e9), np.zeros(2), Schedule.constant(50, 1.0, 0.5),
                    ReversalBuffer("exact"))


def test_schedule_validation():
    with pytest.raises(ValidationError):
        Schedule.constant(3, 0.0)
    with pytest.raises(ValidationError):
        Schedule.constant(3, 0.1, 1.0)
    with pytest.raises(ValidationError):
        Schedule(np.ones(2), np.full(3, 0.5))
    with pytest.raises(ValidationError):
        ReversalBuffer("bogus")


def test_batch_plan(rng):
    plan = BatchPlan(seed=3, batch_size=4)
    a, b = plan.indices(7, 20), plan.indices(7, 20)
    assert np.array_equal(a, b) and len(set(a)) == 4
    assert BatchPlan().indices(1, 20) is None
    assert BatchPlan(batch_size=50).indices(1, 20) is None


def test_train_loss_log_decreases(rng):
    topo = Topology(3, 2)
    X = rng.normal(size=(40, 3))
    data = Dataset.of(X, X @ np.array([0.5, -0.2, 0.1]))
    log = []
    state, buf = trainer.train(model.init_weights(topo, rng), HyperParams(1e-4, 1e-4), Schedule.constant(200, 0.2, 0.9),
                               data, loss_log=log)
    assert len(log) == 200
    assert log[-1] < 0.1 * log[0]
    assert isinstance(state, TrainState) and buf.steps == 200
