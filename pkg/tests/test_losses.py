import math

import numpy as np
import pytest
from pydantic import ValidationError

import gradcheck
import losses
import net

LOG2 = math.log(2.0)


def _sphere_trace(cosines, s=5.0):
    cosines = np.asarray(cosines, dtype=np.float64)
    logits = s * cosines
    return net.ForwardTrace(x=np.zeros(1), head_mode="hypersphere", scale_s=s, logits=logits,
                            probs=net.softmax(logits), cosines=cosines)


def _random_dist(rng, n):
    return rng.dirichlet(np.ones(n))


def test_ce_examples():
    value, grad = losses.ce_loss(np.zeros(2), 0)
    assert value == pytest.approx(0.693147, abs=1e-6)
    assert np.allclose(grad, [-0.5, 0.5])
    value, _ = losses.ce_loss(np.array([1e4, 0.0, 0.0]), 0)
    assert value == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        losses.ce_loss(np.zeros(3), 3)


def test_nce_examples():
    value, _ = losses.nce_loss(_sphere_trace([0.3, 0.3, 0.3, 0.3]), 2, 5.0)
    assert value == pytest.approx(math.log(4.0), abs=1e-12)
    value, _ = losses.nce_loss(_sphere_trace([1.0, -1.0, -1.0], s=50.0), 0, 50.0)
    assert value < 1e-12


def test_nce_rejects_plain_trace():
    plain = net.ForwardTrace(x=np.zeros(1), head_mode="plain", scale_s=5.0, logits=np.zeros(3))
    with pytest.raises(ValueError, match="NCE requires hypersphere head"):
        losses.nce_loss(plain, 0, 5.0)


def test_sp_factors_examples():
    f = losses.sp_factors([1.0, 0.1, -0.3], 0, 0.2)
    assert f.g_t == pytest.approx(0.2)
    f = losses.sp_factors([0.5, -0.2, 0.9], 0, 0.2)
    assert f.g_f[1] == pytest.approx(0.0, abs=1e-15)
    assert f.g_t == pytest.approx(0.7)
    assert f.g_f[2] == pytest.approx(1.1)
    f = losses.sp_factors([0.5, -0.9, 0.9], 0, 0.2, clamp=True)
    assert f.g_f[1] == 0.0
    assert f.g_f[2] == pytest.approx(1.1)


def test_unit_factors_reduce_to_nce_bitwise():
    trace = _sphere_trace([0.4, -0.1, 0.7, 0.2])
    cfg = losses.LossConfig(acc_mode="sp_nce")
    unit = losses.SPFactors(1.0, np.ones(4))
    v_sp, g_sp = losses.sp_acc_loss(trace, 1, cfg, unit)
    v_nce, g_nce = losses.nce_loss(trace, 1, 5.0)
    assert v_sp == v_nce
    assert np.array_equal(g_sp, g_nce)


def test_raising_a_false_cosine_raises_sp_loss():
    cfg = losses.LossConfig(acc_mode="sp_nce")
    # g_f·u_f grows with cos_j only above -beta/2
    low, _ = losses.sp_acc_loss(_sphere_trace([0.6, 0.3, -0.1]), 0, cfg)
    high, _ = losses.sp_acc_loss(_sphere_trace([0.6, 0.4, -0.1]), 0, cfg)
    assert high > low


@pytest.mark.parametrize("c", [-0.4, 0.0, 0.3, 0.5, 0.9])
def test_sp_loss_closed_form_for_equal_cosines(c):
    n, s = 4, 5.0
    cfg = losses.LossConfig(acc_mode="sp_nce", scale_s=s)
    value, _ = losses.sp_acc_loss(_sphere_trace([c] * n, s), 2, cfg)
    # true gain 1-c+beta, false gains c+beta: the margin is s·c·(2c-1)
    assert value == pytest.approx(math.log1p((n - 1) * math.exp(s * c * (2 * c - 1))), abs=1e-12)


def test_hard_false_class_is_upweighted():
    trace = _sphere_trace([0.5, 0.9, -0.5])
    cfg = losses.LossConfig(acc_mode="sp_nce")
    _, g = losses.sp_acc_loss(trace, 0, cfg)
    _, g_plain = losses.nce_loss(trace, 0, 5.0)
    # hard class gets g_f = 1.1, easy class g_f = -0.3
    assert g[1] / g_plain[1] > g[2] / g_plain[2]


def test_kl_and_inc_hand_values():
    p, q = np.array([1.0, 0.0]), np.array([0.5, 0.5])
    assert losses.kl_div(p, q)[0] == pytest.approx(0.693147, abs=1e-6)
    assert losses.inc_loss(p, q)[0] == pytest.approx(0.480453, abs=1e-6)
    assert losses.rob_loss(p, q, 0.2)[0] == pytest.approx(0.619082, abs=1e-6)
    assert losses.rob_loss(p, q, 0.2)[0] == pytest.approx(0.2 * LOG2 + LOG2 ** 2, abs=1e-15)


def test_divergences_vanish_and_stay_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(2, 8))
        p, q = _random_dist(rng, n), _random_dist(rng, n)
        assert losses.kl_div(p, q)[0] >= -1e-12
        assert losses.inc_loss(p, q)[0] >= 0.0
    p = _random_dist(rng, 5)
    assert losses.kl_div(p, p)[0] == 0.0
    assert losses.inc_loss(p, p)[0] == 0.0
    assert losses.rob_loss(p, p, 0.7)[0] == 0.0


def test_divergences_match_naive_sums():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p, q = _random_dist(rng, 6), _random_dist(rng, 6)
        kl = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
        inc = sum((pi * math.log(pi / qi)) ** 2 for pi, qi in zip(p, q))
        assert abs(losses.kl_div(p, q)[0] - kl) <= 1e-12
        assert abs(losses.inc_loss(p, q)[0] - inc) <= 1e-12


def test_alpha_zero_isolates_inconsistency():
    rng = np.random.default_rng(2)
    p, q = _random_dist(rng, 4), _random_dist(rng, 4)
    v, dp, dq = losses.rob_loss(p, q, 0.0)
    iv, idp, idq = losses.inc_loss(p, q)
    assert v == iv
    assert np.array_equal(dp, idp) and np.array_equal(dq, idq)


def test_spat_term_isolation():
    clean = _sphere_trace([0.6, 0.2, -0.4])
    adv = _sphere_trace([0.3, 0.5, -0.2])
    cfg0 = losses.LossConfig(lam=0.0)
    terms = losses.spat_loss(clean, adv, 0, cfg0)
    acc, _ = losses.sp_acc_loss(clean, 0, cfg0)
    assert terms.value == acc
    same = losses.spat_loss(clean, clean, 0, losses.LossConfig())
    assert same.rob == 0.0
    assert same.value == same.acc


def test_trades_row_uses_plain_kl():
    clean = _sphere_trace([0.6, 0.2, -0.4])
    adv = _sphere_trace([0.3, 0.5, -0.2])
    cfg = losses.LossConfig(acc_mode="ce", sp_rob_enabled=False)
    terms = losses.spat_loss(clean, adv, 0, cfg)
    assert terms.rob == losses.kl_div(clean.probs, adv.probs)[0]


def test_lambda_alias_and_strict_keys():
    cfg = losses.LossConfig.model_validate({"lambda": 3.0, "alpha": 0.1})
    assert cfg.lam == 3.0
    assert cfg.model_dump(by_alias=True)["lambda"] == 3.0
    with pytest.raises(ValidationError):
        losses.LossConfig.model_validate({"lamda": 3.0})
    with pytest.raises(ValidationError):
        losses.LossConfig(acc_mode="focal")


def test_attack_objective_kinds():
    clean = _sphere_trace([0.6, 0.2, -0.4])
    adv = _sphere_trace([0.3, 0.5, -0.2])
    cfg = losses.LossConfig()
    assert losses.attack_objective(clean, adv, 0, "ce_on_adv", cfg)[0] == losses.ce_loss(adv.logits, 0)[0]
    assert losses.attack_objective(clean, adv, 0, "rob_kl", cfg)[0] == losses.kl_div(clean.probs, adv.probs)[0]
    with pytest.raises(ValueError):
        losses.attack_objective(clean, adv, 0, "cw", cfg)


@pytest.mark.parametrize("mode", ["sp_nce", "sp_ce", "kl", "inc", "rob", "spat"])
def test_loss_gradients_match_finite_differences(mode):
    r = gradcheck.check_mode(mode, "hypersphere", seed=11)
    assert r.ok, r
