#!/usr/bin/env python3
"""
Central finite-difference oracle for every loss mode and both heads.

Each objective is differentiated w.r.t. all parameters plus both inputs (clean x and
adversarial x'); self-paced factors are frozen at the base point, as in training.
"""
import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass

import numpy as np

import losses
import net

log = logging.getLogger(__name__)

MODES = ("ce", "nce", "sp_nce", "sp_ce", "kl", "inc", "rob", "spat")
HYPERSPHERE_ONLY = ("nce", "sp_nce")
KINK_MIN = 1e-4


@dataclass
class ModeResult:
    mode: str
    head_mode: str
    trials: int
    max_rel_error: float
    worst: str
    ok: bool


def numeric_grad(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f(x)
        x.flat[i] = old - h
        fm = f(x)
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2.0 * h)
    return g


def compare(analytic, numeric, rel_tol=1e-6, abs_tol=1e-8):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(a - n)
    denom = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), 0.0)
    err = np.where(diff <= abs_tol, 0.0, rel)
    worst = int(np.argmax(err)) if err.size else 0
    max_err = float(err[worst]) if err.size else 0.0
    return max_err, worst, max_err <= rel_tol


class _Packer:
    """Flattens (params, x, x') into one vector and back."""

    def __init__(self, params, d):
        self.names = list(params.named_arrays())
        self.shapes = [a.shape for a in params.named_arrays().values()]
        self.d = d

    def pack(self, params, x, x_adv):
        return np.concatenate([a.ravel() for a in params.named_arrays().values()] + [x, x_adv])

    def unpack(self, theta):
        out, off = {}, 0
        for name, shape in zip(self.names, self.shapes):
            size = int(np.prod(shape))
            out[name] = theta[off:off + size].reshape(shape)
            off += size
        x = theta[off:off + self.d]
        x_adv = theta[off + self.d:off + 2 * self.d]
        return net.ModelParams.from_named_arrays(out), x, x_adv

    def coordinate(self, index):
        off = 0
        for name, shape in zip(self.names, self.shapes):
            size = int(np.prod(shape))
            if index < off + size:
                return f"{name}[{np.unravel_index(index - off, shape)}]"
            off += size
        index -= off
        return f"x[{index}]" if index < self.d else f"x_adv[{index - self.d}]"


def objective(mode, params, cfg: net.NetConfig, loss_cfg: losses.LossConfig, x, x_adv, label, factors=None):
    """(value, ParamGrads, dL/dx, dL/dx')."""
    tc = net.forward(params, cfg, x)
    ta = net.forward(params, cfg, x_adv)
    g_clean = np.zeros_like(tc.logits)
    g_adv = np.zeros_like(ta.logits)
    if mode in ("ce", "nce", "sp_nce", "sp_ce"):
        value, g_clean = losses.acc_loss(tc, label, loss_cfg.model_copy(update={"acc_mode": mode}), factors)
    elif mode == "kl":
        value, g_clean, g_adv = losses.kl_div(tc.probs, ta.probs)
    elif mode == "inc":
        value, g_clean, g_adv = losses.inc_loss(tc.probs, ta.probs)
    elif mode == "rob":
        value, g_clean, g_adv = losses.rob_loss(tc.probs, ta.probs, loss_cfg.alpha)
    elif mode == "spat":
        acc_mode = "sp_nce" if cfg.head_mode == "hypersphere" else "sp_ce"
        terms = losses.spat_loss(tc, ta, label, loss_cfg.model_copy(update={"acc_mode": acc_mode}), factors)
        value, g_clean, g_adv = terms.value, terms.grad_clean, terms.grad_adv
    else:
        raise ValueError(f"unknown mode: {mode}")
    pg, gx = net.backward(params, cfg, tc, g_clean)
    pa, gxa = net.backward(params, cfg, ta, g_adv)
    grads = net.ModelParams.from_named_arrays({k: v + pa.named_arrays()[k] for k, v in pg.named_arrays().items()})
    return value, grads, gx, gxa


def _sample_point(cfg, rng, params):
    d = cfg.input_dim
    for _ in range(100):
        x = rng.uniform(0.1, 0.9, d)
        x_adv = x + rng.uniform(-0.05, 0.05, d)
        ok = all(net.min_abs_preactivation(net.forward(params, cfg, v)) >= KINK_MIN for v in (x, x_adv))
        if cfg.activation != "relu" or ok:
            return x, x_adv
    raise RuntimeError("could not find a check point away from relu kinks")


def _random_params(cfg, rng, seed):
    p = net.init_params(cfg, seed)
    for b in p.hidden_biases:
        b[:] = rng.normal(0.0, 0.1, b.shape)
    if cfg.head_mode == "plain":
        p.head_bias[:] = rng.normal(0.0, 0.1, p.head_bias.shape)
    return p


def check_mode(mode, head_mode, activation="tanh", layer_sizes=(4, 6, 5, 3), seed=0, loss_cfg=None,
               scale_s=5.0, rel_tol=1e-6, abs_tol=1e-8, h=1e-5):
    cfg = net.NetConfig(layer_sizes=list(layer_sizes), activation=activation, head_mode=head_mode, scale_s=scale_s)
    loss_cfg = (loss_cfg or losses.LossConfig()).model_copy(update={"scale_s": scale_s})
    rng = np.random.default_rng([seed, 7])
    params = _random_params(cfg, rng, seed)
    x, x_adv = _sample_point(cfg, rng, params)
    label = int(rng.integers(cfg.class_count))

    factors = None
    if mode in ("sp_nce", "sp_ce", "spat"):
        base = net.forward(params, cfg, x)
        factors = losses.sp_factors(base.cosines, label, loss_cfg.beta, loss_cfg.clamp_gf)

    _, grads, gx, gxa = objective(mode, params, cfg, loss_cfg, x, x_adv, label, factors)
    packer = _Packer(params, cfg.input_dim)
    analytic = packer.pack(grads, gx, gxa)

    def f(theta):
        p, xx, xa = packer.unpack(theta)
        return objective(mode, p, cfg, loss_cfg, xx, xa, label, factors)[0]

    numeric = numeric_grad(f, packer.pack(params, x, x_adv), h)
    err, worst, ok = compare(analytic, numeric, rel_tol, abs_tol)
    return ModeResult(mode, head_mode, 1, err, packer.coordinate(worst), ok)


def run_suite(trials=20, layer_sizes=(4, 6, 5, 3), activation="tanh", seed=0, loss_cfg=None, scale_s=5.0,
              rel_tol=1e-6, abs_tol=1e-8):
    results = []
    for mode in MODES:
        heads = ("hypersphere",) if mode in HYPERSPHERE_ONLY else ("plain", "hypersphere")
        for head in heads:
            worst = None
            for t in range(trials):
                r = check_mode(mode, head, activation, layer_sizes, seed * 1000 + t, loss_cfg, scale_s, rel_tol, abs_tol)
                if worst is None or r.max_rel_error > worst.max_rel_error:
                    worst = r
            worst.trials = trials
            worst.ok = worst.max_rel_error <= rel_tol
            log.info("gradcheck %-6s %-11s max_rel_error=%.3e (%s)", mode, head, worst.max_rel_error, worst.worst)
            results.append(worst)
    return results


def main():
    ap = argparse.ArgumentParser(description="finite-difference check of every loss gradient")
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--activation", default="tanh", choices=["relu", "tanh"])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    results = run_suite(args.trials, activation=args.activation, seed=args.seed)
    print(json.dumps([asdict(r) for r in results], ensure_ascii=False, indent=2))
    sys.exit(0 if all(r.ok for r in results) else 1)


if __name__ == "__main__":
    main()
