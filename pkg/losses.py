#!/usr/bin/env python3
"""
Scalar objectives of self-paced adversarial training. Every loss returns its value together
with the gradient w.r.t. the logits it consumed, so net.backward can finish the chain.
"""
from typing import Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import net

Q_FLOOR = 1e-12


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    acc_mode: Literal["ce", "nce", "sp_nce", "sp_ce"] = "sp_nce"
    scale_s: float = 5.0
    beta: float = Field(0.2, ge=0.0)
    lam: float = Field(6.0, ge=0.0, alias="lambda")
    alpha: float = Field(0.2, ge=0.0)
    sp_rob_enabled: bool = True
    clamp_gf: bool = False

    @model_validator(mode="after")
    def _check_scale(self):
        if self.acc_mode in ("nce", "sp_nce") and not self.scale_s > 0:
            raise ValueError("scale_s must be > 0 for NCE losses")
        return self

    @property
    def needs_hypersphere(self):
        return self.acc_mode in ("nce", "sp_nce")


class SPFactors(NamedTuple):
    g_t: float
    g_f: np.ndarray


class LossTerms(NamedTuple):
    value: float
    acc: float
    rob: float
    grad_clean: np.ndarray
    grad_adv: np.ndarray


def _onehot(label, n):
    e = np.zeros(n)
    e[label] = 1.0
    return e


def _softmax_vjp(p, dp):
    """Pull dL/dp back through p = softmax(a)."""
    return p * (dp - p @ dp)


# ==========================
# accuracy terms
# ==========================
def ce_loss(logits, label):
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    m = np.max(logits)
    lse = m + np.log(np.sum(np.exp(logits - m)))
    return float(lse - logits[label]), net.softmax(logits) - _onehot(label, logits.shape[0])


def _require_hypersphere(trace, s=None):
    if trace.head_mode != "hypersphere":
        raise ValueError("NCE requires hypersphere head")
    if s is not None and abs(trace.scale_s - s) > 1e-12:
        raise ValueError(f"trace scale {trace.scale_s} != loss scale {s}")


def nce_loss(trace, label, s):
    _require_hypersphere(trace, s)
    return ce_loss(trace.logits, label)


def sp_factors(cosines, label, beta, clamp=False) -> SPFactors:
    cosines = np.asarray(cosines, dtype=np.float64)
    g_t = 1.0 - float(cosines[label]) + beta
    g_f = cosines + beta
    if clamp:
        g_f = np.maximum(g_f, 0.0)
    g_f = g_f.copy()
    g_f[label] = 0.0  # unused
    return SPFactors(g_t, g_f)


def self_paced_ce(u, label, factors: SPFactors):
    """CE on gain-modulated logits g⊙u; the gains are constants of the step."""
    gains = factors.g_f.copy()
    gains[label] = factors.g_t
    value, grad = ce_loss(gains * u, label)
    return value, gains * grad


def sp_acc_loss(trace, label, cfg: LossConfig, factors: SPFactors = None):
    if cfg.acc_mode == "sp_nce":
        _require_hypersphere(trace, cfg.scale_s)
    elif cfg.acc_mode != "sp_ce":
        raise ValueError(f"sp_acc_loss needs acc_mode sp_nce or sp_ce, got {cfg.acc_mode}")
    if factors is None:
        factors = sp_factors(trace.cosines, label, cfg.beta, cfg.clamp_gf)
    return self_paced_ce(trace.logits, label, factors)


def acc_loss(trace, label, cfg: LossConfig, factors: SPFactors = None):
    if cfg.acc_mode == "ce":
        return ce_loss(trace.logits, label)
    if cfg.acc_mode == "nce":
        return nce_loss(trace, label, cfg.scale_s)
    return sp_acc_loss(trace, label, cfg, factors)


# ==========================
# robustness terms
# ==========================
def _log_ratio(p, q):
    qf = np.maximum(q, Q_FLOOR)
    r = np.zeros_like(p)
    nz = p > 0
    r[nz] = np.log(p[nz]) - np.log(qf[nz])
    return r, qf


def kl_div(p, q):
    """KL(p‖q) and its gradients w.r.t. the logits behind p and q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    r, qf = _log_ratio(p, q)
    value = float(np.sum(p * r))
    dp = np.where(p > 0, r + 1.0, 0.0)
    dq = np.where(q >= Q_FLOOR, -p / qf, 0.0)
    return value, _softmax_vjp(p, dp), _softmax_vjp(q, dq)


def inc_loss(p, q):
    """Σ_j [p_j·log(p_j/q_j)]², the HCP-ECP inconsistency penalty."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    r, qf = _log_ratio(p, q)
    t = p * r
    value = float(np.sum(t * t))
    dp = np.where(p > 0, 2.0 * t * (r + 1.0), 0.0)
    dq = np.where(q >= Q_FLOOR, -2.0 * t * p / qf, 0.0)
    return value, _softmax_vjp(p, dp), _softmax_vjp(q, dq)


def rob_loss(p_clean, p_adv, alpha):
    kl, kl_dp, kl_dq = kl_div(p_clean, p_adv)
    inc, inc_dp, inc_dq = inc_loss(p_clean, p_adv)
    return alpha * kl + inc, alpha * kl_dp + inc_dp, alpha * kl_dq + inc_dq


def robustness_term(p_clean, p_adv, cfg: LossConfig):
    if cfg.sp_rob_enabled:
        return rob_loss(p_clean, p_adv, cfg.alpha)
    return kl_div(p_clean, p_adv)


# ==========================
# compound objective
# ==========================
def spat_loss(trace_clean, trace_adv, label, cfg: LossConfig, factors: SPFactors = None) -> LossTerms:
    """L_acc on the clean branch + λ·L_rob(clean, adv); gradients for both logit vectors."""
    acc, g_acc = acc_loss(trace_clean, label, cfg, factors)
    rob, g_rob_clean, g_rob_adv = robustness_term(trace_clean.probs, trace_adv.probs, cfg)
    return LossTerms(
        value=acc + cfg.lam * rob,
        acc=acc,
        rob=rob,
        grad_clean=g_acc + cfg.lam * g_rob_clean,
        grad_adv=cfg.lam * g_rob_adv,
    )


def attack_objective(trace_clean, trace_adv, label, kind, cfg: LossConfig):
    """Inner-max objective; the clean branch is frozen so only dL/dlogits_adv is returned."""
    if kind == "ce_on_adv":
        return ce_loss(trace_adv.logits, label)
    if kind == "rob_sp":
        value, _, grad = rob_loss(trace_clean.probs, trace_adv.probs, cfg.alpha)
        return value, grad
    if kind == "rob_kl":
        value, _, grad = kl_div(trace_clean.probs, trace_adv.probs)
        return value, grad
    raise ValueError(f"unknown attack loss: {kind}")
