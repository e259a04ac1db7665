"""One test per acceptance criterion; each records a PASS/FAIL line for the summary."""
import time

import numpy as np
import pytest

from aashnet import backtest as bt
from aashnet import baselines, checks, model, trainer
from aashnet.backtest import PanelData, RollingConfig
from aashnet.hypergrad import MetaConfig
from aashnet.model import Dataset, HyperParams, Topology, Weights
from aashnet.trainer import ReversalBuffer, Schedule

PANEL_SEED = 1
SHRINK_CFG = RollingConfig(train_size=1198, horizon=300, refit_every=300)


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def test_1_worked_example(acceptance):
    a, secs = timed(checks.worked_example)
    got = (a.primal, a.grad[0], a.grad[1])
    err = max(abs(x - r) for x, r in zip(got, checks.EXAMPLE_ROUNDED))
    tangents_ok = abs(a.tangent_x1 - a.grad[0]) < 1e-12 and abs(a.tangent_x2 - a.grad[1]) < 1e-12
    ok = err <= 0.005 and tangents_ok and secs < 1
    acceptance(1, ok, f"primal {a.primal:.4f} d/dx1 {a.grad[0]:.4f} d/dx2 {a.grad[1]:.4f} "
                      f"max dev {err:.2e} (tol 5e-3) in {secs:.2f}s")
    assert ok


def test_2_gradient_oracle(acceptance):
    errs, secs = timed(lambda: checks.grad_check(np.random.default_rng(2), trials=50))
    ok = max(errs) <= 1e-5 and secs < 10
    acceptance(2, ok, f"50 draws, max rel err {max(errs):.2e} (tol 1e-5) in {secs:.2f}s")
    assert ok


def test_3_exact_reversal(acceptance):
    rng = np.random.default_rng(3)
    topo = Topology(5, 2)
    assert topo.n_weights == 20
    data = Dataset.of(rng.normal(size=(40, 5)), rng.normal(size=40))
    h = HyperParams(0.01, 0.01, 0.5)
    w0 = model.init_weights(topo, rng).flat()
    grad_fn = trainer.BatchedObjective(topo, data, h).grad_fn
    sched = Schedule.constant(1000, 0.1, 0.9)
    buf = ReversalBuffer("exact")

    def roundtrip():
        return trainer.reverse_all(trainer.run(grad_fn, w0, sched, buf), grad_fn, sched, buf)

    state, secs = timed(roundtrip)
    same_w = np.array_equal(state.wq, buf.to_fixed(w0))
    zero_v = not np.any(state.vq)
    ok = same_w and zero_v and buf.depth == 0 and buf.empty and secs < 10
    acceptance(3, ok, f"T=1000, 20 weights: w bitwise {same_w}, v zero {zero_v}, "
                      f"buffer depth {buf.depth} in {secs:.2f}s")
    assert ok


def test_4_hypergradient_oracle(acceptance):
    res, secs = timed(lambda: checks.hypergrad_check(seed=0, m=5, hidden=3, n_train=50, n_valid=20, T=100))
    worst = max(e for _, _, e in res.values())
    ok = worst <= 1e-3 and secs < 120
    detail = ", ".join(f"d{k} {r:+.4e}/{f:+.4e}" for k, (r, f, _) in res.items())
    acceptance(4, ok, f"{detail}; max rel err {worst:.2e} (tol 1e-3) in {secs:.1f}s")
    assert ok


def test_5_ridge_equivalence(acceptance):
    rng = np.random.default_rng(5)
    n, m, lam2 = 200, 10, 0.05
    X = rng.normal(size=(n, m))
    y = X @ rng.normal(size=m) + 0.5 * rng.normal(size=n) + 0.2
    topo = Topology(m, 0)

    def fit():
        state, _ = trainer.train(Weights.zeros(topo), HyperParams(0.0, lam2, 1.0), Schedule.constant(2000, 0.3, 0.9),
                                 Dataset.of(X, y))
        return Weights.from_flat(topo, state.w)

    w, secs = timed(fit)
    # mean-squared loss plus lam2/2 |b|^2 has the same minimizer as ridge with lam = n lam2 / 2
    ref = baselines.ridge_fit(X, y, n * lam2 / 2)
    err = float(np.max(np.abs(w.skip[:m] - ref.coef)) / np.max(np.abs(ref.coef)))
    ok = err <= 1e-4 and abs(w.skip[m] - ref.intercept) <= 1e-4 and secs < 30
    acceptance(5, ok, f"n=200 m=10: max rel coef err {err:.2e} (tol 1e-4) in {secs:.2f}s")
    assert ok


def test_6_gcv_correctness(acceptance):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(20, 5))
    y = X @ rng.normal(size=5) + rng.normal(size=20)
    grid = baselines.ridge_grid(X)

    def compare():
        path = baselines.ridge_gcv_path(X, y, grid)
        worst_gcv = worst_loo = 0.0
        for lam, score in zip(grid, path):
            loo, gcv = baselines.loo_shortcut(X, y, lam)
            worst_gcv = max(worst_gcv, abs(score - gcv) / gcv)
            brute = np.mean([(y[i] - baselines.ridge_fit(np.delete(X, i, 0), np.delete(y, i), lam)
                              .predict(X[i:i + 1])[0]) ** 2 for i in range(20)])
            worst_loo = max(worst_loo, abs(loo - brute) / brute)
        return worst_gcv, worst_loo

    (worst_gcv, worst_loo), secs = timed(compare)
    ok = worst_gcv <= 1e-10 and worst_loo <= 1e-10 and secs < 1
    acceptance(6, ok, f"{grid.size} grid points: GCV vs hat matrix {worst_gcv:.1e}, "
                      f"LOO shortcut vs refits {worst_loo:.1e} (tol 1e-10) in {secs:.2f}s")
    assert ok


def _dense_no_l1(panel, cfg, fc, ticker):
    """Dense-block weights trained from the forecaster's own init with the L1 penalty off."""
    design = bt.build_design(panel, cfg, cfg.origins(panel)[0], ticker)
    topo = Topology(design.X.shape[1], fc.hidden, fc.activation)
    w0 = model.init_weights(topo, fc._ticker_seed(ticker), alpha=fc.hyper.alpha)
    state, _ = trainer.train(w0, fc.hyper.replace(lam1=0.0), fc.sched, Dataset.of(design.X, design.y))
    return Weights.from_flat(topo, state.w).dense_flat()


@pytest.mark.slow
def test_7_shrinkage_on_linear_data(acceptance):
    t0 = time.perf_counter()
    panel = bt.synth_generate("linear_var", m=10, T=1500, seed=PANEL_SEED)
    fc = bt.AAShNetForecaster()
    net = bt.rolling_forecast(panel, SHRINK_CFG, fc)
    ridge = bt.rolling_forecast(panel, SHRINK_CFG, bt.make_forecaster("ridge"))
    _, r_net = bt.score_rmse(net)
    _, r_ridge = bt.score_rmse(ridge)
    meta = np.concatenate([s.weights.dense_flat() for s in net.states.values()])
    plain = np.concatenate([_dense_no_l1(panel, SHRINK_CFG, fc, k) for k in panel.tickers])
    ratio = float(np.mean(np.abs(meta)) / np.mean(np.abs(plain)))
    secs = time.perf_counter() - t0
    close = abs(r_net / r_ridge - 1) <= 0.10
    ok = close and ratio <= 0.25 and secs < 600 and not net.failures
    acceptance(7, ok, f"RMSE aashnet {r_net:.5f} vs ridge {r_ridge:.5f} ({r_net / r_ridge - 1:+.1%}, tol 10%); "
                      f"dense |w| ratio {ratio:.3f} (tol 0.25) in {secs:.0f}s")
    assert ok


@pytest.mark.slow
def test_8_nonlinearity_payoff(acceptance):
    t0 = time.perf_counter()
    panel = bt.synth_generate("nonlinear", m=10, T=1500, seed=PANEL_SEED)
    r = {name: bt.score_rmse(bt.rolling_forecast(panel, SHRINK_CFG, bt.make_forecaster(name)))[1]
         for name in ("aashnet", "ridge", "lasso")}
    secs = time.perf_counter() - t0
    gain = 1 - r["aashnet"] / min(r["ridge"], r["lasso"])
    ok = gain >= 0.05 and secs < 600
    acceptance(8, ok, f"RMSE aashnet {r['aashnet']:.5f} ridge {r['ridge']:.5f} lasso {r['lasso']:.5f}; "
                      f"improvement {gain:.1%} (min 5%) in {secs:.0f}s")
    assert ok


@pytest.mark.slow
def test_9_backtest_protocol(acceptance):
    t0 = time.perf_counter()
    panel = bt.synth_generate("linear_var", m=10, T=600, seed=PANEL_SEED)
    cfg = RollingConfig(train_size=500, horizon=60, refit_every=5)
    models = ["aashnet", "ridge", "lasso", "rw"]
    reports, records = bt.run_backtest(panel, cfg, models)
    table = bt.comparison_table(reports)
    secs = time.perf_counter() - t0
    refits = {k: reports[k].refits for k in models}
    layout = table.splitlines()[0].split() == ["Model", "Return", "Sharpe", "Ave(RMSE)"]
    rows = all(any(line.startswith(k) and "FAILED" not in line for line in table.splitlines()) for k in models)
    rw_exact = True
    for r in (x for x in records if x.model == "rw"):
        t_fit = r.origin - (r.origin - cfg.origins(panel)[0]) % cfg.refit_every
        design = bt.build_design(panel, cfg, t_fit, r.ticker)
        rw_exact &= r.forecast == float(np.mean(design.raw_y))
    ok = all(v == 12 for v in refits.values()) and layout and rows and rw_exact and secs < 600
    acceptance(9, ok, f"refits {sorted(set(refits.values()))}, table layout {layout and rows}, "
                      f"rw == window mean {rw_exact} in {secs:.0f}s")
    print(table)
    assert ok


def test_10_no_look_ahead(acceptance):
    t0 = time.perf_counter()
    master = np.random.default_rng(10)
    bad = []
    for k in range(20):
        kind = bt.SYNTH_KINDS[k % 2]
        m = int(master.integers(2, 5))
        train_size = int(master.integers(30, 60))
        horizon = int(master.integers(4, 9))
        cfg = RollingConfig(train_size, horizon, int(master.integers(1, 4)), int(master.integers(1, 3)))
        T = train_size + cfg.lag_order + horizon + 1 + int(master.integers(0, 10))
        panel = bt.synth_generate(kind, m=m, T=T, seed=int(master.integers(1 << 30)))
        origins = list(cfg.origins(panel))
        cut = int(master.choice(origins[:-1]))
        moved = PanelData(panel.dates, panel.tickers, panel.returns.copy())
        moved.returns[cut + 1:] = master.normal(0.0, 0.05, moved.returns[cut + 1:].shape)
        for name in ("rw", "ridge", "lasso", "aashnet"):
            def make():
                if name == "aashnet":
                    return bt.AAShNetForecaster(hidden=2, sched=Schedule.constant(30, 0.2, 0.9),
                                                meta=MetaConfig(meta_iters=1))
                return bt.make_forecaster(name)
            a = bt.rolling_forecast(panel, cfg, make())
            b = bt.rolling_forecast(moved, cfg, make())
            if any(x.forecast != y.forecast for x, y in zip(a, b) if x.origin <= cut):
                bad.append((k, name))
    secs = time.perf_counter() - t0
    ok = not bad and secs < 60
    acceptance(10, ok, f"20 panels x 4 models, leaks {bad or 'none'} in {secs:.1f}s")
    assert ok
