import numpy as np
import pytest

import cli
import gradcheck
import net


def test_numeric_grad_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = gradcheck.numeric_grad(lambda v: float(np.sum(v ** 2)), x)
    assert np.allclose(g, 2.0 * x, atol=1e-8)
    assert x.tolist() == [1.0, -2.0, 0.5]


def test_compare_tolerances():
    err, worst, ok = gradcheck.compare([1.0, 2.0, 1e-12], [1.0, 2.0 + 1e-7, 0.0])
    assert ok and worst == 1
    assert err == pytest.approx(1e-7 / (2.0 + 1e-7))
    _, worst, ok = gradcheck.compare([1.0, 1.0], [1.0, 1.1])
    assert not ok and worst == 1


def test_suite_covers_every_mode_and_head():
    results = gradcheck.run_suite(trials=2)
    got = {(r.mode, r.head_mode) for r in results}
    assert ("nce", "plain") not in got and ("sp_nce", "plain") not in got
    assert len(got) == 2 * len(gradcheck.MODES) - 2
    assert all(r.ok for r in results), [r for r in results if not r.ok]


def test_relu_network_passes():
    for mode in ("ce", "spat"):
        assert gradcheck.check_mode(mode, "plain", activation="relu", seed=3).ok


@pytest.mark.slow
def test_full_suite_twenty_trials():
    for act in ("tanh", "relu"):
        results = gradcheck.run_suite(trials=20, activation=act)
        assert all(r.ok for r in results), [r for r in results if not r.ok]


def test_cli_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--trials", "1", "--quiet"]) == 0
    out = capsys.readouterr().out
    assert "spat" in out and "FAIL" not in out


def test_cli_gradcheck_catches_sign_flip(monkeypatch, capsys):
    original = net.backward

    def flipped(params, cfg, trace, dL_dlogits):
        grads, gx = original(params, cfg, trace, dL_dlogits)
        return grads, -gx

    monkeypatch.setattr(net, "backward", flipped)
    assert cli.main(["gradcheck", "--trials", "1", "--quiet"]) == 1
    err = capsys.readouterr().err
    assert "gradient check failed" in err and "x" in err
