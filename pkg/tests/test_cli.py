import json

import numpy as np
import pytest

from aashnet import baselines, cli
from aashnet.config import RunConfig
from aashnet.errors import ValidationError
from aashnet.model import Weights


def write_cfg(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


SMALL = {
    "seed": 3,
    "data": {"synth": {"kind": "nonlinear", "m": 3, "T": 120}, "window": 60},
    "topology": {"hidden": 2},
    "schedule": {"T": 40, "eta": 0.2, "gamma": 0.9},
    "meta": {"iters": 2},
    "backtest": {"train_size": 60, "horizon": 6, "refit_every": 3, "models": ["aashnet", "ridge", "lasso", "rw", "bh"]},
    "gradcheck": {"trials": 5, "hypergrad": False},
}


def run(tmp_path, command, doc, *extra):
    out = tmp_path / command
    rc = cli.main([command, "--config", write_cfg(tmp_path, doc), "--output", str(out), *extra])
    return rc, out


def test_gradcheck_passes_and_reports(tmp_path, capsys):
    rc, out = run(tmp_path, "gradcheck", SMALL)
    assert rc == 0
    text = (out / "gradcheck.txt").read_text()
    assert "primal 17.0398" in text and "dy/dx1 2.7206" in text and "dy/dx2 6.0000" in text
    assert "gradcheck passed" in text
    assert text == capsys.readouterr().out


def test_gradcheck_zero_tolerance_fails(tmp_path):
    doc = dict(SMALL, gradcheck={"trials": 3, "hypergrad": False, "grad_tol": 0.0})
    rc, out = run(tmp_path, "gradcheck", doc)
    assert rc == 2
    assert "FAILED" in (out / "gradcheck.txt").read_text()


def test_gradcheck_deterministic(tmp_path):
    _, a = run(tmp_path, "gradcheck", SMALL)
    out_b = tmp_path / "again"
    assert cli.main(["gradcheck", "--config", write_cfg(tmp_path, SMALL), "--output", str(out_b)]) == 0
    assert (a / "gradcheck.txt").read_text() == (out_b / "gradcheck.txt").read_text()
    ca, cb = (json.loads((d / "config.json").read_text()) for d in (a, out_b))
    ca.pop("output"), cb.pop("output")
    assert ca == cb


def test_train_outputs(tmp_path):
    doc = dict(SMALL, trainer={"dump_trajectory": True})
    rc, out = run(tmp_path, "train", doc)
    assert rc == 0
    w = Weights.from_json((out / "weights.json").read_text())
    assert w.topology.m == 3 and w.topology.hidden == 2
    log = (out / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,loss" and len(log) == 41
    assert (out / "trajectory.bin").stat().st_size > 0
    run_meta = json.loads((out / "run.json").read_text())
    assert run_meta["command"] == "train" and run_meta["seed"] == 3


def test_seed_override(tmp_path):
    rc, out = run(tmp_path, "train", SMALL, "--seed", "9")
    assert rc == 0
    assert json.loads((out / "config.json").read_text())["seed"] == 9


def test_hyperopt_outputs(tmp_path):
    rc, out = run(tmp_path, "hyperopt", SMALL)
    assert rc == 0
    lines = [json.loads(x) for x in (out / "meta_log.ndjson").read_text().splitlines()]
    assert [r["iteration"] for r in lines] == [0, 1, 2]
    best = json.loads((out / "best_hyper.json").read_text())
    assert best["valid_loss"] == min(r["valid_loss"] for r in lines)
    assert (out / "weights.json").exists()


def test_backtest_outputs(tmp_path):
    rc, out = run(tmp_path, "backtest", SMALL)
    assert rc == 0
    table = (out / "table.txt").read_text()
    for name in ("aashnet", "ridge", "lasso", "rw", "bh"):
        assert name in table
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["ridge"]["refits"] == 2
    assert (out / "forecasts.csv").read_text().count("\n") == 1 + 4 * 6 * 3
    assert (out / "equity.csv").read_text().splitlines()[0] == "date,aashnet,ridge,lasso,rw,bh"


def test_backtest_models_flag(tmp_path):
    rc, out = run(tmp_path, "backtest", SMALL, "--models", "rw,bh")
    assert rc == 0
    assert set(json.loads((out / "metrics.json").read_text())) == {"rw", "bh"}


def test_synth_then_ingest(tmp_path):
    rc, out = run(tmp_path, "synth", SMALL)
    assert rc == 0
    doc = dict(SMALL, data={"path": str(out / "panel.csv"), "window": 60})
    rc, out2 = run(tmp_path, "backtest", doc, "--models", "ridge,rw")
    assert rc == 0


@pytest.mark.parametrize("doc", [
    {"hyper": {"lam3": 1.0}},
    {"backtest": {"models": ["ols"]}},
    {"schedule": {"T": 3, "eta": [0.1, 0.1]}},
    {"hyper": {"alpha": 2.0}},
    {"data": {"path": "/nonexistent/panel.csv"}},
])
def test_validation_errors_exit_1(tmp_path, doc, capsys):
    rc, _ = run(tmp_path, "train" if "backtest" not in doc else "backtest", doc)
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_key_names_path():
    with pytest.raises(ValidationError, match="meta.rat"):
        RunConfig.from_dict({"meta": {"rat": 1}})


def test_numerical_failure_exits_2(tmp_path):
    doc = dict(SMALL, schedule={"T": 200, "eta": 50.0, "gamma": 0.5}, hyper={"lam1": 0.0, "lam2": 0.0})
    rc, _ = run(tmp_path, "train", doc)
    assert rc == 2


def test_config_roundtrip():
    cfg = RunConfig.from_dict(SMALL)
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.data.synth.kind == "nonlinear" and again.meta.iters == 2


def test_linear_training_matches_ridge(tmp_path):
    doc = {
        "data": {"synth": {"kind": "linear_var", "m": 4, "T": 200}, "window": 150},
        "topology": {"hidden": 0},
        "hyper": {"lam1": 0.0, "lam2": 0.02, "alpha": 1.0},
        "schedule": {"T": 1500, "eta": 0.3, "gamma": 0.9},
    }
    rc, out = run(tmp_path, "train", doc)
    assert rc == 0
    w = Weights.from_json((out / "weights.json").read_text())
    cfg = RunConfig.from_dict(doc)
    _, design = cli.training_design(cfg, cli.load_panel(cfg))
    n = design.X.shape[0]
    fit = baselines.ridge_fit(design.X, design.y, n * 0.02 / 2)
    np.testing.assert_allclose(w.skip[:4], fit.coef, rtol=1e-6)
