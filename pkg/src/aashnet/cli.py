"""``aashnet`` command line: gradcheck, train, hyperopt, backtest, synth.

Exit status is 0 on success, 1 for invalid input or configuration and 2
for numerical failures, including a failed gradcheck.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys

import numpy as np

from . import backtest, checks, hypergrad, model
from .config import RunConfig
from .errors import NumericalError, ValidationError
from .model import Dataset, HyperParams, Topology
from .trainer import BatchPlan, ReversalBuffer, Schedule, train

log = logging.getLogger("aashnet")

# purpose tags for seed derivation, so every stream comes from the one config seed
SEED_INIT, SEED_BATCH = 1, 2


def _rng(cfg: RunConfig, tag: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, tag])


# ---------------------------------------------------------------------------
# Config -> objects
# ---------------------------------------------------------------------------

def load_panel(cfg: RunConfig) -> backtest.PanelData:
    d = cfg.data
    if d.path:
        return backtest.ingest_csv(d.path, d.layout, d.benchmark_column)
    s = d.synth
    return backtest.synth_generate(s.kind, s.m, s.T, cfg.seed, s.sigma, s.density, s.radius, s.hidden, s.gain)


def hyper_of(cfg: RunConfig) -> HyperParams:
    h = cfg.hyper
    return HyperParams(h.lam1, h.lam2, h.alpha, h.eps)


def schedule_of(cfg: RunConfig, T: int | None = None) -> Schedule:
    s = cfg.schedule
    T = s.T if T is None else T
    eta = np.broadcast_to(np.asarray(s.eta, dtype=np.float64), (T,)) if np.ndim(s.eta) == 0 else s.eta
    gamma = np.broadcast_to(np.asarray(s.gamma, dtype=np.float64), (T,)) if np.ndim(s.gamma) == 0 else s.gamma
    if len(eta) != T or len(gamma) != T:
        raise ValidationError(f"per-step schedules must have length schedule.T = {T}")
    return Schedule(eta, gamma)


def buffer_of(cfg: RunConfig) -> ReversalBuffer:
    t = cfg.trainer
    return ReversalBuffer(mode=t.mode, frac_bits=t.frac_bits, decay_bits=t.decay_bits,
                          checkpoint_every=t.checkpoint_every)


def plan_of(cfg: RunConfig) -> BatchPlan | None:
    bs = cfg.trainer.batch_size
    return None if bs is None else BatchPlan(seed=int(_rng(cfg, SEED_BATCH).integers(2**31)), batch_size=bs)


def topology_of(cfg: RunConfig, m: int) -> Topology:
    t = cfg.topology
    if t.m is not None and t.m != m:
        raise ValidationError(f"topology.m = {t.m} but the data provide {m} predictors")
    return Topology(m, t.hidden, t.activation, t.include_bias)


def meta_of(cfg: RunConfig) -> hypergrad.MetaConfig:
    m = cfg.meta
    return hypergrad.MetaConfig(meta_iters=m.iters, meta_rate=m.rate, targets=tuple(m.targets),
                                valid_fraction=m.valid_fraction, max_step=m.max_step,
                                learn_schedule=m.learn_schedule, mode=cfg.trainer.mode,
                                transforms=cfg.hyper.transforms)


def training_design(cfg: RunConfig, panel: backtest.PanelData):
    """The standardized window ending at the last row, for one target ticker."""
    p = cfg.data.lag_order
    target = cfg.data.target or panel.tickers[0]
    window = cfg.data.window or panel.T - 1 - p
    if window < 2 or window + p > panel.T - 1:
        raise ValidationError(f"data.window = {window} does not fit a panel of {panel.T} rows with {p} lags")
    rc = backtest.RollingConfig(train_size=window, horizon=1, lag_order=p)
    design = backtest.build_design(panel, rc, window + p, target)
    return target, design


def forecaster_kw(cfg: RunConfig) -> dict:
    refit_T = cfg.schedule.refit_T
    return dict(hidden=cfg.topology.hidden, activation=cfg.topology.activation, hyper=hyper_of(cfg),
                sched=schedule_of(cfg), refit_sched=schedule_of(cfg, refit_T) if refit_T else None,
                meta=meta_of(cfg), seed=cfg.seed, mode=cfg.trainer.mode)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gradcheck(cfg: RunConfig, out: str) -> int:
    g = cfg.gradcheck
    lines, failed = [], []

    def check(name, err, tol):
        ok = err <= tol
        if not ok:
            failed.append(name)
        lines.append(f"{name:<28} max rel err {err:.3e}  tol {tol:.1e}  {'ok' if ok else 'FAIL'}")

    a = checks.worked_example()
    lines.append(f"worked example f(x1,x2) = x1*x2 - cos(x1) at {checks.EXAMPLE_POINT}")
    lines.append(f"  primal {a.primal:.4f}   dy/dx1 {a.grad[0]:.4f}   dy/dx2 {a.grad[1]:.4f}")
    lines.append(f"  tangents (1,0) -> {a.tangent_x1:.4f}   (0,1) -> {a.tangent_x2:.4f}")
    got = (a.primal, a.grad[0], a.grad[1])
    check("worked example vs rounded", max(abs(x - r) for x, r in zip(got, checks.EXAMPLE_ROUNDED)),
          g.example_tol)
    lines.append("")
    lines.append(a.table)
    lines.append("")
    rng = np.random.default_rng([cfg.seed, 10])
    check(f"grad_w ({g.trials} draws)", max(checks.grad_check(rng, g.trials)), g.grad_tol)
    check(f"hvp ({g.trials} draws)", max(checks.hvp_check(rng, g.trials)), g.hvp_tol)
    if g.hypergrad:
        res = checks.hypergrad_check(seed=cfg.seed)
        for name, (rev, fd, err) in res.items():
            lines.append(f"  d{name}: reverse {rev:+.8e}  finite diff {fd:+.8e}")
        check("hypergradient", max(e for _, _, e in res.values()), g.hypergrad_tol)
    lines.append("gradcheck " + ("passed" if not failed else "FAILED: " + ", ".join(failed)))
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    _write(out, "gradcheck.txt", report)
    return 0 if not failed else 2


def cmd_train(cfg: RunConfig, out: str) -> int:
    panel = load_panel(cfg)
    target, design = training_design(cfg, panel)
    topo = topology_of(cfg, design.X.shape[1])
    h = hyper_of(cfg)
    w0 = model.init_weights(topo, _rng(cfg, SEED_INIT), alpha=h.alpha)
    losses: list = []
    dump = None
    if cfg.trainer.dump_trajectory:
        dump = open(os.path.join(out, "trajectory.bin"), "wb")
    try:
        state, buf = train(w0, h, schedule_of(cfg), Dataset.of(design.X, design.y), plan_of(cfg), buffer_of(cfg),
                           dump=dump, loss_log=losses)
    finally:
        if dump is not None:
            dump.close()
    w = model.Weights.from_flat(topo, state.w)
    _write(out, "weights.json", w.to_json(target=target, lam1=h.lam1, lam2=h.lam2, alpha=h.alpha, eps=h.eps))
    _write(out, "train_log.csv", "step,loss\n" + "".join(f"{t},{v!r}\n" for t, v in enumerate(losses, 1)))
    final = model.regularized_loss(w, h, Dataset.of(design.X, design.y))
    print(f"trained {target}: {len(losses)} steps, final loss {final:.6g}, buffer depth {buf.depth}")
    return 0


def cmd_hyperopt(cfg: RunConfig, out: str) -> int:
    panel = load_panel(cfg)
    target, design = training_design(cfg, panel)
    topo = topology_of(cfg, design.X.shape[1])
    mc = meta_of(cfg)
    h0 = hyper_of(cfg)
    tr, va = hypergrad.split_train_valid(Dataset.of(design.X, design.y), mc.valid_fraction)
    w0 = model.init_weights(topo, _rng(cfg, SEED_INIT), alpha=h0.alpha)
    with open(os.path.join(out, "meta_log.ndjson"), "w", encoding="utf-8") as fh:
        res = hypergrad.meta_optimize(mc, h0, tr, va, schedule_of(cfg), topo, w_init=w0, plan=plan_of(cfg),
                                      log_fh=fh)
    h = res.hyper
    best = {"target": target, "lam1": h.lam1, "lam2": h.lam2, "alpha": h.alpha, "eps": h.eps,
            "valid_loss": min((r["valid_loss"] for r in res.history), default=None),
            "iterations": len(res.history)}
    _write(out, "best_hyper.json", json.dumps(best, indent=2, sort_keys=True) + "\n")
    if res.weights is not None:
        _write(out, "weights.json", res.weights.to_json(target=target, lam1=h.lam1, lam2=h.lam2, alpha=h.alpha))
    for r in res.history:
        print(f"iter {r['iteration']:>3}  valid {r['valid_loss']:.6g}  lam1 {r['lam1']:.4g}  lam2 {r['lam2']:.4g}"
              f"  alpha {r['alpha']:.4f}{'  *' if r['accepted'] else ''}")
    return 0


def cmd_backtest(cfg: RunConfig, out: str, models=None) -> int:
    panel = load_panel(cfg)
    b = cfg.backtest
    rc = backtest.RollingConfig(b.train_size, b.horizon, b.refit_every, b.lag_order, b.targets, b.predictors)
    if b.rule != "equal_weight_long_short":
        raise ValidationError(f"unknown portfolio rule {b.rule!r}")
    models = list(models or b.models)
    reports, records = backtest.run_backtest(panel, rc, models, forecaster_kw(cfg), b.portfolio_size, cfg.seed,
                                             b.risk_free)
    table = backtest.comparison_table(reports)
    _write(out, "table.txt", table)
    _write(out, "metrics.json", backtest.metrics_json(reports) + "\n")
    backtest.write_forecasts(records, os.path.join(out, "forecasts.csv"))
    backtest.write_equity(reports, os.path.join(out, "equity.csv"))
    sys.stdout.write(table)
    return 0


def cmd_synth(cfg: RunConfig, out: str) -> int:
    s = cfg.data.synth
    panel = backtest.synth_generate(s.kind, s.m, s.T, cfg.seed, s.sigma, s.density, s.radius, s.hidden, s.gain)
    path = os.path.join(out, "panel.csv")
    panel.to_csv(path)
    print(f"wrote {panel.T} x {panel.m} {s.kind} panel to {path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _write(directory: str, name: str, text: str):
    with open(os.path.join(directory, name), "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aashnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gradcheck", "train", "hyperopt", "backtest", "synth"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--output", help="output directory (default: output.directory from the config)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        if name == "backtest":
            sp.add_argument("--models", help="comma-separated subset of " + ",".join(backtest.MODEL_NAMES))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = cfg.output.directory = args.output or cfg.output.directory
        os.makedirs(out, exist_ok=True)
        _write(out, "config.json", cfg.to_json())
        # the only field that differs between identical runs
        run = {"command": args.command, "seed": cfg.seed,
               "generated_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")}
        _write(out, "run.json", json.dumps(run, indent=2, sort_keys=True) + "\n")
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "hyperopt":
            return cmd_hyperopt(cfg, out)
        if args.command == "backtest":
            models = [m.strip() for m in args.models.split(",") if m.strip()] if args.models else None
            return cmd_backtest(cfg, out, models)
        return cmd_synth(cfg, out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
