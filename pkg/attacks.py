#!/usr/bin/env python3
"""
L∞ white-box adversaries: FGSM and K-step PGD with gaussian start, projection and box clamp.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

import losses
import net

log = logging.getLogger(__name__)

ATTACK_STREAM = 1
CONTAINMENT_TOL = 1e-12


class AttackConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epsilon: float = Field(8 / 255, ge=0.0)
    step_size: Optional[float] = None
    steps: int = Field(10, ge=1)
    random_start: bool = True
    init_noise_sigma: float = Field(0.001, ge=0.0)
    box_lo: float = 0.0
    box_hi: float = 1.0
    attack_loss: Literal["ce_on_adv", "rob_sp", "rob_kl"] = "rob_sp"

    @model_validator(mode="before")
    @classmethod
    def _default_step(cls, data):
        if isinstance(data, dict) and data.get("step_size") is None:
            eps = float(data.get("epsilon", 8 / 255))
            # ε/4 for training objectives, ε/10 for the evaluation CE attack
            denom = 10.0 if data.get("attack_loss", "rob_sp") == "ce_on_adv" else 4.0
            # any positive step when ε=0; the projection discards it
            data = {**data, "step_size": eps / denom if eps > 0 else 1e-3}
        return data

    @model_validator(mode="after")
    def _check_bounds(self):
        if not self.box_lo < self.box_hi:
            raise ValueError(f"box_lo {self.box_lo} must be < box_hi {self.box_hi}")
        if self.step_size is None or not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        return self

    @classmethod
    def for_training(cls, epsilon=8 / 255, steps=10, **kw):
        return cls(epsilon=epsilon, steps=steps, random_start=True, attack_loss="rob_sp", **kw)

    @classmethod
    def for_evaluation(cls, epsilon=8 / 255, steps=20, **kw):
        return cls(epsilon=epsilon, steps=steps, random_start=False, attack_loss="ce_on_adv", **kw)


def attack_rng(seed, index, epoch=0):
    return np.random.default_rng([seed, ATTACK_STREAM, epoch, index])


def project_linf(x_adv, x_ref, eps, box_lo, box_hi):
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x_adv.shape != x_ref.shape:
        raise ValueError(f"project_linf length mismatch: {x_adv.shape} vs {x_ref.shape}")
    out = np.clip(x_adv, x_ref - eps, x_ref + eps)
    return np.clip(out, box_lo, box_hi)


def assert_contained(x_adv, x_ref, atk: AttackConfig):
    dist = float(np.max(np.abs(x_adv - x_ref))) if x_adv.size else 0.0
    if dist > atk.epsilon + CONTAINMENT_TOL or np.any(x_adv < atk.box_lo) or np.any(x_adv > atk.box_hi):
        raise RuntimeError(f"adversary escaped constraints: linf={dist:.3e}, eps={atk.epsilon}")
    return dist


def input_gradient(params, cfg, x, label, kind="ce_on_adv", loss_cfg=None, trace_clean=None):
    trace = net.forward(params, cfg, x)
    _, g = losses.attack_objective(trace_clean, trace, label, kind, loss_cfg or losses.LossConfig())
    _, gx = net.backward(params, cfg, trace, g)
    return gx


def fgsm(params, cfg, x, label, atk: AttackConfig):
    x = np.asarray(x, dtype=np.float64)
    gx = input_gradient(params, cfg, x, label)
    x_adv = np.clip(x + atk.epsilon * np.sign(gx), atk.box_lo, atk.box_hi)
    assert_contained(x_adv, x, atk)
    return x_adv


def pgd(params, cfg, x_clean, label, atk: AttackConfig, loss_cfg=None, rng=None):
    """
    x' = x + σ·N(0, I) (random_start), then K steps of
    x' <- Π(x' + step·sign(∇_{x'} L_attack)).
    """
    x_clean = np.asarray(x_clean, dtype=np.float64)
    loss_cfg = loss_cfg or losses.LossConfig()
    trace_clean = None
    if atk.attack_loss != "ce_on_adv":
        trace_clean = net.forward(params, cfg, x_clean)
    x_adv = x_clean.copy()
    if atk.random_start:
        if rng is None:
            rng = np.random.default_rng()
        x_adv = x_adv + atk.init_noise_sigma * rng.standard_normal(x_adv.shape)
    for _ in range(atk.steps):
        gx = input_gradient(params, cfg, x_adv, label, atk.attack_loss, loss_cfg, trace_clean)
        x_adv = project_linf(x_adv + atk.step_size * np.sign(gx), x_clean, atk.epsilon, atk.box_lo, atk.box_hi)
    assert_contained(x_adv, x_clean, atk)
    return x_adv


def generate(params, cfg, features, labels, atk: AttackConfig, loss_cfg=None, method="pgd",
             seed=0, epoch=0, indices=None, threads=1, progress=False):
    """
    Attack every row of `features`; sample i draws its start from attack_rng(seed, indices[i], epoch),
    so the output does not depend on thread count.
    """
    n = len(labels)
    if indices is None:
        indices = range(n)

    def one(item):
        i, idx = item
        if method == "fgsm":
            return fgsm(params, cfg, features[i], int(labels[i]), atk)
        return pgd(params, cfg, features[i], int(labels[i]), atk, loss_cfg, attack_rng(seed, int(idx), epoch))

    items = list(enumerate(indices))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            out = list(tqdm(executor.map(one, items), total=n, desc=f"{method} attack", unit="sample", leave=False, disable=not progress))
    else:
        out = [one(it) for it in tqdm(items, desc=f"{method} attack", unit="sample", leave=False, disable=not progress)]
    if not out:
        return np.zeros((0, features.shape[1]))
    return np.stack(out)
