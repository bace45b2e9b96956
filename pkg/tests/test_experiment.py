import numpy as np
import pytest

from macv import experiment as exp_mod
from macv.data import Family
from macv.errors import NonConvergence
from macv.experiment import (ExperimentConfig, candidate_specs, correct_candidates, gee_candidates,
                             ring_weights, run_experiment)

SMOKE = {"design": "design1", "n": 40, "rho": 0.3, "beta": [0.2, 0, 0, 0, -0.5, 0.1], "M": 2,
         "seed": 3}


def test_design1_has_32_candidates():
    specs = gee_candidates(Family.GEE_BERNOULLI, 5)
    assert len(specs) == 32
    assert len({s.label for s in specs}) == 32
    assert all(4 not in s.covariates for s in specs)


def test_ring_weights_row_normalised():
    a = ring_weights(10, 2)
    np.testing.assert_allclose(a.sum(axis=1), 1.0)
    assert np.all(np.diag(a) == 0)
    np.testing.assert_array_equal(a, a.T)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**SMOKE, "colour": "blue"})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"design": "design9", "n": 5, "beta": [0, 1]})
    cfg = ExperimentConfig.from_dict({**SMOKE, "seal": {"mode": "conventional"}})
    assert "ma_conventional" in cfg.methods and "ma_seal" not in cfg.methods


def test_smoke_run_shape_and_finite():
    table = run_experiment(SMOKE)
    cfg = table.config
    assert len(table.rows) == 2 * len(cfg.methods)
    assert all(np.isfinite(r["scaled_loss"]) for r in table.rows)
    s = table.summary()
    for m in cfg.methods:
        assert set(s["methods"][m]) >= {"mean", "25%", "50%", "75%"}
    assert table.loss_matrix.shape == (2, 32)


def test_runs_are_reproducible():
    a = run_experiment({**SMOKE, "M": 1, "response": "count"})
    b = run_experiment({**SMOKE, "M": 1, "response": "count"})
    assert a.rows == b.rows


@pytest.mark.slow
def test_seal_and_conventional_runs_agree():
    # the runner also asserts MA <= best vertex criterion on every replication
    table = run_experiment({**SMOKE, "n": 30, "M": 2, "methods": ["ma_seal", "ma_conventional"]})
    assert not table.failures
    a = table.method_losses("ma_seal")
    b = table.method_losses("ma_conventional")
    np.testing.assert_allclose(a, b, rtol=0.2)


def test_failures_are_counted(monkeypatch):
    real = exp_mod.run_replication

    def flaky(cfg, rep, *args, **kw):
        if rep == 1:
            raise NonConvergence("forced")
        return real(cfg, rep, *args, **kw)

    monkeypatch.setattr(exp_mod, "run_replication", flaky)
    table = run_experiment({**SMOKE, "M": 3, "methods": ["equal"]})
    assert list(table.failures) == [1]
    assert table.summary()["completed"] == 2


def test_sar_design_smoke():
    table = run_experiment({"design": "sar", "n": 60, "beta": [0.5, 1.0, -0.5, 0.0], "rho": 0.3,
                            "M": 2, "methods": ["ma_seal", "equal", "cv", "qic_pan"]})
    assert not table.failures
    # subsets of (x1, x2) that keep x1, times two weight matrices
    assert table.labels == ("sar:x1|A1", "sar:x1|A2", "sar:x1+x2|A1", "sar:x1+x2|A2")
    s = table.summary()
    assert s["methods"]["qic_pan"] == {"applicable": False}
    assert np.isfinite(s["methods"]["ma_seal"]["mean"])


def test_qr_design_smoke():
    table = run_experiment({"design": "qr", "n": 60, "beta": [0.0, 1.0, 0.5, 0.0], "alpha": 0.3,
                            "M": 2, "methods": ["ma_seal", "equal", "cv"]})
    assert not table.failures
    assert np.isfinite(table.method_losses("ma_seal")).all()


def test_consistency_design_candidates():
    cfg = ExperimentConfig.from_dict({"design": "consistency", "n": 50, "beta": [0.2, 0.5, -0.4, 0.3],
                                      "response": "count", "rho": 0.3})
    specs = candidate_specs(cfg)
    assert len(specs) == 8
    assert correct_candidates(cfg, specs) == [7]
    table = run_experiment(cfg, methods=["ma_seal", "equal"])
    w = table.column("ma_seal", "correct_weight")
    assert 0 <= w[0] <= 1
    assert table.column("equal", "correct_weight")[0] == pytest.approx(1 / 8)
