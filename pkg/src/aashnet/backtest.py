"""Rolling one-step-ahead forecasting, the long/short portfolio, and synthetic panels.

Time indexing: ``returns[t]`` is the return realized on ``dates[t]``. A
forecast made at origin ``t`` may look at rows ``<= t`` only and targets
row ``t + 1``. Training row ``s`` pairs the lags ``returns[s], ...,
returns[s - p + 1]`` with the target ``returns[s + 1]``, so the window for
origin ``t`` is ``s = t - train_size, ..., t - 1``.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import baselines, hypergrad, model
from .errors import AAShNetError, ValidationError
from .model import Dataset, HyperParams, Standardizer, Topology, Weights
from .trainer import ReversalBuffer, Schedule, train

log = logging.getLogger(__name__)

TRADING_DAYS = 252
BENCHMARK_COLUMN = "benchmark"
MODEL_NAMES = ("aashnet", "ridge", "lasso", "rw", "bh")


@dataclass
class PanelData:
    dates: list
    tickers: list
    returns: np.ndarray
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dates = list(self.dates)
        self.tickers = list(self.tickers)
        self.returns = np.asarray(self.returns, dtype=np.float64)
        if self.returns.ndim != 2 or self.returns.shape != (len(self.dates), len(self.tickers)):
            raise ValidationError(f"returns shape {self.returns.shape} does not match "
                                  f"{len(self.dates)} dates x {len(self.tickers)} tickers")
        if len(set(self.tickers)) != len(self.tickers):
            raise ValidationError("duplicate ticker names")
        for a, b in zip(self.dates, self.dates[1:]):
            if b <= a:
                raise ValidationError(f"dates not strictly increasing at {b}")
        if not np.isfinite(self.returns).all():
            raise ValidationError("panel contains non-finite returns")

    @property
    def T(self) -> int:
        return len(self.dates)

    @property
    def m(self) -> int:
        return len(self.tickers)

    def column(self, ticker: str) -> int:
        try:
            return self.tickers.index(ticker)
        except ValueError:
            raise ValidationError(f"unknown ticker {ticker!r}") from None

    def to_csv(self, path_or_buf=None) -> str:
        bench = self.attrs.get(BENCHMARK_COLUMN)
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["date"] + self.tickers + ([BENCHMARK_COLUMN] if bench is not None else []))
        for i, d in enumerate(self.dates):
            row = [repr(float(x)) for x in self.returns[i]]
            if bench is not None:
                row.append(repr(float(bench[i])))
            wr.writerow([d.isoformat()] + row)
        text = out.getvalue()
        if path_or_buf is not None:
            with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def ingest_csv(path, layout: str = "wide", benchmark_column: str = BENCHMARK_COLUMN) -> PanelData:
    """Read a wide ``date,TICKER,...`` file.

    Rows with a blank or unparsable cell are dropped with a warning; a column
    named ``benchmark_column`` is kept aside as the buy-and-hold series.
    """
    if layout != "wide":
        raise ValidationError(f"unsupported layout {layout!r}")
    if isinstance(path, io.TextIOBase):
        rows = list(csv.reader(path))
    else:
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise ValidationError(f"cannot read panel {path}: {exc}") from None
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise ValidationError("empty panel file")
    header = [c.strip() for c in rows[0]]
    if not header or header[0].lower() != "date" or len(header) < 2:
        raise ValidationError("header must be 'date' followed by ticker names")
    names = header[1:]
    bench_idx = names.index(benchmark_column) if benchmark_column in names else None
    dates, values, dropped, seen = [], [], 0, set()
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            if len(row) != len(header):
                raise ValueError("wrong number of cells")
            d = dt.date.fromisoformat(row[0].strip())
            vals = [float(c) for c in row[1:]]
            if not all(math.isfinite(v) for v in vals):
                raise ValueError("non-finite cell")
        except ValueError as exc:
            dropped += 1
            log.warning("dropping line %d: %s", lineno, exc)
            continue
        if d in seen:
            raise ValidationError(f"duplicate date {d} on line {lineno}")
        if dates and d < dates[-1]:
            raise ValidationError(f"dates not monotone: {d} after {dates[-1]} on line {lineno}")
        seen.add(d)
        dates.append(d)
        values.append(vals)
    if not dates:
        raise ValidationError("no usable rows in panel file")
    R = np.array(values, dtype=np.float64)
    attrs = {"dropped_rows": dropped, "source": str(getattr(path, "name", path))}
    tickers = list(names)
    if bench_idx is not None:
        attrs[BENCHMARK_COLUMN] = R[:, bench_idx].copy()
        R = np.delete(R, bench_idx, axis=1)
        del tickers[bench_idx]
    if not tickers:
        raise ValidationError("panel has no ticker columns")
    return PanelData(dates, tickers, R, attrs)


# ---------------------------------------------------------------------------
# Rolling design
# ---------------------------------------------------------------------------

@dataclass
class RollingConfig:
    train_size: int = 500
    horizon: int = 60
    refit_every: int = 5
    lag_order: int = 1
    targets: Sequence[str] | None = None
    predictors: Sequence[str] | None = None

    def __post_init__(self):
        if self.train_size < 2:
            raise ValidationError("train_size must be >= 2")
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if self.refit_every < 1:
            raise ValidationError("refit_every must be >= 1")
        if self.lag_order < 1:
            raise ValidationError("lag_order must be >= 1")

    def resolve(self, panel: PanelData) -> tuple[list, list]:
        targets = list(self.targets) if self.targets else list(panel.tickers)
        predictors = list(self.predictors) if self.predictors else list(panel.tickers)
        for name in targets + predictors:
            panel.column(name)
        if self.train_size + self.lag_order + self.horizon + 1 > panel.T:
            raise ValidationError(f"panel of {panel.T} rows is too short for train_size={self.train_size}, "
                                  f"lag_order={self.lag_order}, horizon={self.horizon}")
        return targets, predictors

    def origins(self, panel: PanelData) -> range:
        """Forecast origins; the last ``horizon`` rows are the ones predicted."""
        return range(panel.T - self.horizon - 1, panel.T - 1)


def lag_matrix(panel: PanelData, cols: Sequence[int], rows, p: int) -> np.ndarray:
    """Row ``s`` -> ``[returns[s, cols], returns[s-1, cols], ..., returns[s-p+1, cols]]``."""
    rows = np.asarray(rows)
    return np.hstack([panel.returns[rows - k][:, cols] for k in range(p)])


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    x_next: np.ndarray
    raw_y: np.ndarray
    xs: Standardizer
    ys: Standardizer

    def __iter__(self):
        return iter((self.X, self.y))


def build_design(panel: PanelData, cfg: RollingConfig, t: int, target: str) -> Design:
    """Standardized training window for forecasting ``target`` from origin ``t``.

    Unpacks as ``(X, y)``; ``x_next`` is the standardized predictor row at
    ``t`` itself, and ``raw_y`` the unscaled window targets.
    """
    p = cfg.lag_order
    if t - cfg.train_size - p < 0 or t >= panel.T:
        raise ValidationError(f"origin {t} leaves no room for a {cfg.train_size}-row window with {p} lags")
    predictors = list(cfg.predictors) if cfg.predictors else list(panel.tickers)
    cols = [panel.column(c) for c in predictors]
    j = panel.column(target)
    rows = np.arange(t - cfg.train_size, t)
    Xraw = lag_matrix(panel, cols, rows, p)
    raw_y = panel.returns[rows + 1, j]
    xs = Standardizer.fit(Xraw)
    ys = Standardizer.fit(raw_y[:, None])
    X = xs.transform(Xraw)
    y = ys.transform(raw_y[:, None])[:, 0]
    x_next = xs.transform(lag_matrix(panel, cols, [t], p))[0]
    return Design(X, y, x_next, raw_y, xs, ys)


# ---------------------------------------------------------------------------
# Forecasters
# ---------------------------------------------------------------------------

class Forecaster(Protocol):
    name: str

    def fit(self, design: Design, ticker: str, prev):
        """Return a fitted state; ``prev`` is the last state for this ticker or None."""

    def predict(self, state, design: Design, x_next: np.ndarray) -> float:
        """Forecast in raw return units. ``design`` is the one the state was fitted on."""


class RandomWalkDrift:
    name = "rw"

    def fit(self, design, ticker, prev):
        return baselines.rw_drift_forecast(design.raw_y)

    def predict(self, state, design, x_next):
        return state


class LinearGCV:
    def __init__(self, method: str = "ridge"):
        if method not in ("ridge", "lasso"):
            raise ValidationError(f"unknown linear method {method!r}")
        self.name = method

    def fit(self, design, ticker, prev):
        return baselines.gcv_select(design.X, design.y, method=self.name)

    def predict(self, state, design, x_next):
        return float(design.ys.inverse(state.predict(x_next[None, :]))[0])


@dataclass
class NetState:
    weights: Weights
    hyper: HyperParams
    meta_history: list = field(default_factory=list)


class AAShNetForecaster:
    """Meta-optimizes the hyperparameters at a ticker's first fit, then only retrains.

    Later refits keep the selected hyperparameters and start from the previous
    weights.
    """

    name = "aashnet"

    def __init__(self, hidden: int = 5, activation: str = "tanh", hyper: HyperParams | None = None,
                 sched: Schedule | None = None, meta: hypergrad.MetaConfig | None = None,
                 refit_sched: Schedule | None = None, seed: int = 0, mode: str = "exact"):
        self.hidden = hidden
        self.activation = activation
        self.hyper = hyper or HyperParams(lam1=3e-3)
        self.sched = sched or Schedule.constant(1000, 0.3, 0.9)
        self.refit_sched = refit_sched or self.sched
        self.meta = meta or hypergrad.MetaConfig()
        self.seed = seed
        self.mode = mode

    def _ticker_seed(self, ticker: str) -> np.random.Generator:
        key = [self.seed] + [ord(c) for c in ticker]
        return np.random.default_rng(key)

    def fit(self, design, ticker, prev):
        topo = Topology(design.X.shape[1], self.hidden, self.activation)
        data = Dataset.of(design.X, design.y)
        if prev is None:
            w0 = model.init_weights(topo, self._ticker_seed(ticker), alpha=self.hyper.alpha)
            tr, va = hypergrad.split_train_valid(data, self.meta.valid_fraction)
            res = hypergrad.meta_optimize(self.meta, self.hyper, tr, va, self.sched, topo, w_init=w0)
            h, history, sched = res.hyper, res.history, self.sched
        else:
            w0, h, history, sched = prev.weights, prev.hyper, prev.meta_history, self.refit_sched
        state, _ = train(w0, h, sched, data, buf=ReversalBuffer(mode=self.mode))
        return NetState(Weights.from_flat(topo, state.w), h, history)

    def predict(self, state, design, x_next):
        z = model.predict(state.weights, state.hyper, x_next)
        return float(design.ys.inverse(np.array([[z]]))[0, 0])


def make_forecaster(name: str, **kw) -> Forecaster:
    if name == "rw":
        return RandomWalkDrift()
    if name in ("ridge", "lasso"):
        return LinearGCV(name)
    if name == "aashnet":
        return AAShNetForecaster(**kw)
    raise ValidationError(f"unknown model {name!r}; choose from {MODEL_NAMES}")


# ---------------------------------------------------------------------------
# Rolling loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForecastRecord:
    date: dt.date
    ticker: str
    forecast: float
    realized: float
    model: str
    origin: int = -1
    refit: bool = False


@dataclass
class RollingResult:
    records: list
    refits: int
    failures: list = field(default_factory=list)
    states: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def rolling_forecast(panel: PanelData, cfg: RollingConfig, forecaster: Forecaster) -> RollingResult:
    """One-step forecasts for every target over the last ``cfg.horizon`` rows.

    A refit happens at holdout steps 0, refit_every, 2*refit_every, ...; in
    between, the latest fit is applied to the new predictor row. A failing
    refit is recorded and the previous fit carried forward. With no previous
    fit to fall back on, the window mean is used.
    """
    targets, _ = cfg.resolve(panel)
    states: dict = {}
    designs: dict = {}
    records, failures = [], []
    refits = 0
    for step, t in enumerate(cfg.origins(panel)):
        refit = step % cfg.refit_every == 0
        refits += refit
        for ticker in targets:
            design = build_design(panel, cfg, t, ticker)
            if refit:
                try:
                    states[ticker] = forecaster.fit(design, ticker, states.get(ticker))
                    designs[ticker] = design
                except AAShNetError as exc:
                    log.warning("%s refit at %s failed for %s: %s", forecaster.name, panel.dates[t], ticker, exc)
                    failures.append({"date": panel.dates[t].isoformat(), "ticker": ticker, "error": str(exc)})
            if ticker in states:
                fitted = designs[ticker]
                # predictors are rescaled with the statistics of the fitting window
                x_next = fitted.xs.transform(design.xs.inverse(design.x_next))
                fc = forecaster.predict(states[ticker], fitted, x_next)
            else:
                fc = baselines.rw_drift_forecast(design.raw_y)
            j = panel.column(ticker)
            records.append(ForecastRecord(panel.dates[t + 1], ticker, float(fc), float(panel.returns[t + 1, j]),
                                          forecaster.name, t, refit))
    return RollingResult(records, refits, failures, states)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class PortfolioResult:
    dates: list
    daily: np.ndarray
    cumulative: float
    sharpe: float
    sharpe_flag: str | None = None
    flat_days: int = 0
    tickers: list = field(default_factory=list)

    def equity(self) -> np.ndarray:
        return np.cumprod(1.0 + self.daily)


def _annualized_sharpe(daily: np.ndarray, rf: float) -> tuple[float, str | None]:
    ex = daily - rf / TRADING_DAYS
    if ex.size < 2:
        return float("nan"), "too_few_days"
    sd = float(np.std(ex, ddof=1))
    if sd <= 1e-15 * max(1.0, float(np.max(np.abs(ex)))):
        return float("nan"), "zero_variance"
    return float(np.mean(ex) / sd * math.sqrt(TRADING_DAYS)), None


def choose_portfolio(tickers: Sequence[str], size: int | None, seed: int = 0) -> list:
    """Random subset without replacement, returned in the original order."""
    tickers = list(tickers)
    if size is None or size >= len(tickers):
        return tickers
    if size < 1:
        raise ValidationError("portfolio size must be >= 1")
    pick = np.random.default_rng(seed).choice(len(tickers), size=size, replace=False)
    return [tickers[i] for i in sorted(pick)]


def portfolio_sim(records, rule: str = "equal_weight_long_short", tickers: Sequence[str] | None = None,
                  rf: float = 0.0) -> PortfolioResult:
    """Sign rule: +1/M when the forecast is positive, -1/M when negative, 0 otherwise."""
    if rule != "equal_weight_long_short":
        raise ValidationError(f"unknown portfolio rule {rule!r}")
    records = list(records)
    if not records:
        raise ValidationError("no forecast records")
    if tickers is None:
        tickers = sorted({r.ticker for r in records})
    names = list(tickers)
    keep = set(names)
    dates = sorted({r.date for r in records})
    di = {d: i for i, d in enumerate(dates)}
    ti = {t: i for i, t in enumerate(names)}
    F = np.full((len(dates), len(names)), np.nan)
    Y = np.full_like(F, np.nan)
    for r in records:
        if r.ticker in keep:
            F[di[r.date], ti[r.ticker]] = r.forecast
            Y[di[r.date], ti[r.ticker]] = r.realized
    if np.isnan(F).any() or np.isnan(Y).any():
        raise ValidationError("records do not cover every (date, ticker) of the holdout")
    W = np.sign(F) / len(names)
    daily = np.sum(W * Y, axis=1)
    flat = np.all(W == 0, axis=1)
    for d in np.asarray(dates, dtype=object)[flat]:
        log.info("flat day %s: every forecast is zero", d)
    sharpe, flag = _annualized_sharpe(daily, rf)
    return PortfolioResult(dates, daily, float(np.prod(1.0 + daily) - 1.0), sharpe, flag, int(flat.sum()), names)


def buy_and_hold(panel: PanelData, dates: Sequence, rf: float = 0.0) -> PortfolioResult:
    """Compound the benchmark column; without one, the equal-weight average of all tickers."""
    series = panel.attrs.get(BENCHMARK_COLUMN)
    if series is None:
        series = panel.returns.mean(axis=1)
    idx = {d: i for i, d in enumerate(panel.dates)}
    daily = np.array([series[idx[d]] for d in dates], dtype=np.float64)
    sharpe, flag = _annualized_sharpe(daily, rf)
    return PortfolioResult(list(dates), daily, float(np.prod(1.0 + daily) - 1.0), sharpe, flag, 0, [])


def score_rmse(records) -> tuple[dict, float]:
    """``({ticker: rmse}, cross-sectional mean)``."""
    err: dict = {}
    for r in records:
        err.setdefault(r.ticker, []).append(r.forecast - r.realized)
    if not err:
        raise ValidationError("no forecast records")
    per = {k: float(np.sqrt(np.mean(np.square(v)))) for k, v in sorted(err.items())}
    return per, float(np.mean(list(per.values())))


@dataclass
class ModelReport:
    model: str
    portfolio: PortfolioResult | None = None
    rmse: dict | None = None
    avg_rmse: float = float("nan")
    refits: int = 0
    failures: list = field(default_factory=list)
    error: str | None = None

    def metrics(self) -> dict:
        def num(x):
            return None if x is None or not math.isfinite(x) else x
        out = {"status": "failed" if self.error else "ok", "refits": self.refits,
               "refit_failures": self.failures}
        if self.error:
            out["error"] = self.error
        if self.portfolio is not None:
            out.update(cumulative_return=self.portfolio.cumulative, sharpe=num(self.portfolio.sharpe),
                       sharpe_flag=self.portfolio.sharpe_flag, flat_days=self.portfolio.flat_days)
        out["avg_rmse"] = num(self.avg_rmse)
        out["rmse"] = self.rmse
        return out


def run_backtest(panel: PanelData, cfg: RollingConfig, models: Sequence[str], forecaster_kw: dict | None = None,
                 portfolio_size: int | None = None, portfolio_seed: int = 0, rf: float = 0.0):
    """Every requested model on the same schedule; returns ``(reports, records)``.

    Failures are isolated per model and show up in that model's report.
    """
    if not models:
        raise ValidationError("no models requested")
    targets, _ = cfg.resolve(panel)
    book = choose_portfolio(targets, portfolio_size, portfolio_seed)
    holdout = [panel.dates[t + 1] for t in cfg.origins(panel)]
    reports, all_records = {}, []
    for name in models:
        if name not in MODEL_NAMES:
            raise ValidationError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
        rep = ModelReport(name)
        try:
            if name == "bh":
                rep.portfolio = buy_and_hold(panel, holdout, rf)
            else:
                fc = make_forecaster(name, **((forecaster_kw or {}) if name == "aashnet" else {}))
                res = rolling_forecast(panel, cfg, fc)
                rep.refits, rep.failures = res.refits, res.failures
                rep.portfolio = portfolio_sim(res.records, tickers=book, rf=rf)
                rep.rmse, rep.avg_rmse = score_rmse(res.records)
                all_records.extend(res.records)
        except AAShNetError as exc:
            log.error("model %s failed: %s", name, exc)
            rep.error = str(exc)
        reports[name] = rep
    return reports, all_records


def comparison_table(reports: dict) -> str:
    """Plain-text table with Return, Sharpe and Ave(RMSE) columns."""
    head = f"{'Model':<10}{'Return':>12}{'Sharpe':>12}{'Ave(RMSE)':>14}"
    lines = [head, "-" * len(head)]

    def cell(x, fmt):
        return "n/a" if x is None or not math.isfinite(x) else format(x, fmt)

    for name, rep in reports.items():
        if rep.error:
            lines.append(f"{name:<10}{'FAILED':>12}{'':>12}{'':>14}  {rep.error}")
            continue
        p = rep.portfolio
        ret = cell(p.cumulative, ".4f") if p else "n/a"
        sh = cell(p.sharpe, ".3f") if p else "n/a"
        lines.append(f"{name:<10}{ret:>12}{sh:>12}{cell(rep.avg_rmse, '.5f'):>14}")
    return "\n".join(lines) + "\n"


def write_forecasts(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["date", "ticker", "model", "forecast", "realized"])
        for r in sorted(records, key=lambda r: (r.model, r.date, r.ticker)):
            wr.writerow([r.date.isoformat(), r.ticker, r.model, repr(r.forecast), repr(r.realized)])


def write_equity(reports: dict, path):
    names = [k for k, r in reports.items() if r.portfolio is not None]
    if not names:
        return
    dates = reports[names[0]].portfolio.dates
    curves = [reports[k].portfolio.equity() for k in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["date"] + names)
        for i, d in enumerate(dates):
            wr.writerow([d.isoformat()] + [repr(float(c[i])) for c in curves])


def metrics_json(reports: dict) -> str:
    return json.dumps({k: r.metrics() for k, r in reports.items()}, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Synthetic panels
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("linear_var", "nonlinear")
MAX_RADIUS = 0.7


def spectral_radius(A) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if np.size(A) else 0.0


def sparse_var_matrix(m: int, rng: np.random.Generator, density: float = 0.3, radius: float = 0.5) -> np.ndarray:
    """Sparse ``m x m`` matrix with nonzero diagonal, rescaled to the given spectral radius."""
    if not 0 < radius <= MAX_RADIUS:
        raise ValidationError(f"radius must lie in (0, {MAX_RADIUS}]")
    mask = rng.random((m, m)) < density
    np.fill_diagonal(mask, True)
    A = rng.normal(0.0, 1.0, (m, m)) * mask
    r = spectral_radius(A)
    if r == 0:
        A = np.eye(m)
        r = 1.0
    return A * (radius / r)


def business_days(n: int, start: str = "2000-01-03") -> list:
    days = np.busday_offset(np.datetime64(start), np.arange(n), roll="forward")
    return [d.item() for d in days.astype("datetime64[D]")]


def synth_generate(kind: str, m: int = 10, T: int = 1500, seed: int = 0, sigma: float = 0.01,
                   density: float = 0.3, radius: float = 0.5, hidden: int = 3, gain: float = 3.0,
                   burn_in: int = 200) -> PanelData:
    """Synthetic return panel, a deterministic function of its arguments.

    ``linear_var``: ``x[t+1] = A x[t] + sigma e``.
    ``nonlinear``: ``x[t+1] = A x[t] + s C tanh(B x[t] / s) + sigma e`` with
    ``s = sigma`` (1 when noiseless), so the nonlinearity acts at the scale
    of the returns; the rows of ``B`` have norm ``gain``.

    With ``sigma = 0`` the series starts from a random state and satisfies
    the recurrence exactly from the first row; otherwise ``burn_in`` rows
    are discarded.
    """
    if kind not in SYNTH_KINDS:
        raise ValidationError(f"kind must be one of {SYNTH_KINDS}")
    if m < 1 or T < 2:
        raise ValidationError("need m >= 1 and T >= 2")
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    rng = np.random.default_rng([seed, SYNTH_KINDS.index(kind)])
    A = sparse_var_matrix(m, rng, density, radius)
    attrs: dict = {"kind": kind, "A": A, "sigma": sigma, "seed": seed}
    scale = sigma if sigma > 0 else 1.0
    if kind == "nonlinear":
        B = rng.normal(0.0, 1.0, (hidden, m))
        B *= gain / np.linalg.norm(B, axis=1, keepdims=True)
        C = rng.normal(0.0, 1.0, (m, hidden))
        attrs.update(B=B, C=C)

    def step(x):
        nxt = A @ x
        if kind == "nonlinear":
            nxt = nxt + scale * (C @ np.tanh(B @ x / scale))
        return nxt

    skip = burn_in if sigma > 0 else 0
    x = rng.normal(0.0, scale, m) if sigma == 0 else np.zeros(m)
    noise = rng.normal(0.0, 1.0, (T + skip, m)) * sigma
    out = np.empty((T + skip, m))
    out[0] = x
    for t in range(1, T + skip):
        out[t] = step(out[t - 1]) + noise[t]
    if not np.isfinite(out).all() or np.abs(out).max() > 1e6 * scale:
        raise ValidationError("generated panel diverged")
    R = out[skip:]
    tickers = [f"S{i:02d}" for i in range(m)]
    return PanelData(business_days(T), tickers, R, attrs)
