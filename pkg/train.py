#!/usr/bin/env python3
"""
Self-paced adversarial training: per minibatch, craft x' with PGD on the robustness loss,
then take one SGD step on L_acc(x) + λ·L_rob(x, x') (mean over the batch).
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

import attacks
import data as ds
import linalg
import losses
import net

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message, epoch, batch_index, dump=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.dump = dump or {}


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(30, ge=0)
    batch_size: int = Field(128, ge=1)
    lr_initial: float = Field(0.1, ge=0.0)
    lr_decay_factor: float = Field(10.0, gt=0.0)
    lr_decay_epochs: list[int] = []
    seed: int = 0
    loss_cfg: losses.LossConfig = losses.LossConfig()
    atk_train: attacks.AttackConfig = attacks.AttackConfig.for_training()
    eval_every: int = Field(1, ge=1)
    adversarial: bool = True
    threads: int = Field(1, ge=1)

    @field_validator("lr_decay_epochs")
    @classmethod
    def _check_decay(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"lr_decay_epochs must be strictly increasing, got {v}")
        return v

    @model_validator(mode="after")
    def _check_decay_range(self):
        if any(e >= self.epochs or e < 0 for e in self.lr_decay_epochs) and self.epochs > 0:
            raise ValueError(f"lr_decay_epochs {self.lr_decay_epochs} must lie in [0, {self.epochs})")
        return self

    def lr_at(self, epoch):
        k = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr_initial / self.lr_decay_factor ** k


class EpochMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epoch: int
    mean_total_loss: float
    mean_acc_loss: float
    mean_rob_loss: float
    clean_accuracy: float = Field(ge=0.0, le=1.0)
    # training-time accuracy on the PGD points; None when training is natural
    robust_accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)
    mean_cos_true: float
    mean_cos_max_false: float
    learning_rate: float
    wall_ms: float
    eval_clean_accuracy: Optional[float] = None
    eval_robust_accuracy: Optional[float] = None


def sgd_step(params: net.ModelParams, grads: net.ModelParams, lr):
    p, g = params.named_arrays(), grads.named_arrays()
    if params.shapes() != grads.shapes():
        raise ValueError(f"sgd_step shape mismatch: {params.shapes()} vs {grads.shapes()}")
    return net.ModelParams.from_named_arrays({k: linalg.saxpy(-lr, g[k], p[k]) for k in p})


def _add_into(acc: net.ModelParams, g: net.ModelParams):
    a, b = acc.named_arrays(), g.named_arrays()
    for k in a:
        a[k] += b[k]


def sample_step(params, cfg: net.NetConfig, x, label, x_adv, loss_cfg):
    """SPAT loss and parameter gradient for one (x, y, x') triple."""
    tc = net.forward(params, cfg, x)
    ta = net.forward(params, cfg, x_adv) if x_adv is not None else tc
    terms = losses.spat_loss(tc, ta, label, loss_cfg)
    grads, _ = net.backward(params, cfg, tc, terms.grad_clean)
    if x_adv is not None:
        g_adv, _ = net.backward(params, cfg, ta, terms.grad_adv)
        _add_into(grads, g_adv)
    return terms, grads, tc, ta


def _cos_summary(trace, label):
    c = trace.cosines
    false = np.delete(c, label)
    return float(c[label]), float(false.max()) if false.size else 0.0


def train(model: net.ModelParams, data: ds.Dataset, cfg: TrainConfig, net_cfg: net.NetConfig,
          on_epoch=None, eval_data: ds.Dataset = None, eval_atk: attacks.AttackConfig = None, progress=True):
    """Returns (final params, list of EpochMetrics)."""
    if len(data) == 0:
        raise ValueError("training data is empty")
    net.check_params(model, net_cfg)
    if data.dim != net_cfg.input_dim:
        raise ValueError(f"data dim {data.dim} != input dim {net_cfg.input_dim}")
    if data.class_count > net_cfg.class_count:
        raise ValueError(f"data has {data.class_count} classes, net only {net_cfg.class_count}")
    if cfg.loss_cfg.needs_hypersphere and net_cfg.head_mode != "hypersphere":
        raise ValueError(f"acc_mode {cfg.loss_cfg.acc_mode} requires the hypersphere head")

    params = model.copy()
    history = []
    executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in tqdm(range(cfg.epochs), desc="Epochs", unit="epoch", disable=not progress):
            t0 = time.perf_counter()
            lr = cfg.lr_at(epoch)
            totals = np.zeros(3)
            correct_clean = correct_adv = 0
            cos_true = cos_false = 0.0
            parts = ds.batches(data, cfg.batch_size, cfg.seed, epoch)
            for b, idx in enumerate(tqdm(parts, desc=f"epoch {epoch}", unit="batch", leave=False, disable=not progress)):
                frozen = params

                def one(i):
                    x, y = data.features[i], int(data.labels[i])
                    x_adv = None
                    if cfg.adversarial:
                        x_adv = attacks.pgd(frozen, net_cfg, x, y, cfg.atk_train, cfg.loss_cfg,
                                            attacks.attack_rng(cfg.seed, int(i), epoch))
                    return sample_step(frozen, net_cfg, x, y, x_adv, cfg.loss_cfg)

                results = list(executor.map(one, idx)) if executor else [one(i) for i in idx]
                values = np.array([r[0].value for r in results])
                if not np.all(np.isfinite(values)):
                    dump = {"epoch": epoch, "batch_index": b, "indices": idx.tolist(),
                            "labels": data.labels[idx].tolist(), "losses": values.tolist()}
                    log.error("non-finite loss: %s", dump)
                    raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b, dump)

                grad = frozen.zeros_like()
                for (terms, g, tc, ta), i in zip(results, idx):
                    _add_into(grad, g)
                    totals += (terms.value, terms.acc, terms.rob)
                    y = int(data.labels[i])
                    correct_clean += tc.prediction == y
                    if cfg.adversarial:
                        correct_adv += ta.prediction == y
                    ct, cf = _cos_summary(tc, y)
                    cos_true += ct
                    cos_false += cf
                grad = grad.map(lambda a: a / len(idx))
                params = sgd_step(frozen, grad, lr)

            n = len(data)
            m = EpochMetrics(
                epoch=epoch,
                mean_total_loss=totals[0] / n,
                mean_acc_loss=totals[1] / n,
                mean_rob_loss=totals[2] / n,
                clean_accuracy=correct_clean / n,
                robust_accuracy=correct_adv / n if cfg.adversarial else None,
                mean_cos_true=cos_true / n,
                mean_cos_max_false=cos_false / n,
                learning_rate=lr,
                wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
            if eval_data is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
                m.eval_clean_accuracy, _ = evaluate(params, net_cfg, eval_data, threads=cfg.threads)
                if eval_atk is not None:
                    m.eval_robust_accuracy, _ = evaluate(params, net_cfg, eval_data, eval_atk, cfg.loss_cfg,
                                                         seed=cfg.seed, threads=cfg.threads)
            robust = "-" if m.robust_accuracy is None else f"{m.robust_accuracy:.4f}"
            log.info("epoch %d lr=%.4g loss=%.4f clean=%.4f robust=%s (%.0f ms)", epoch, lr,
                     m.mean_total_loss, m.clean_accuracy, robust, m.wall_ms)
            history.append(m)
            if on_epoch is not None:
                on_epoch(m, params)
    finally:
        if executor:
            executor.shutdown()
    return params, history


def evaluate(params, cfg: net.NetConfig, data: ds.Dataset, atk: attacks.AttackConfig = None, loss_cfg=None,
             source_params=None, source_cfg=None, method="pgd", seed=0, threads=1, progress=False):
    """
    Accuracy and C×C confusion (true i, predicted j). With `atk`, each sample is attacked first;
    `source_params` switches to transfer (black-box) adversaries crafted on another model.
    """
    if len(data) == 0:
        raise ValueError("evaluation data is empty")
    X = data.features
    if atk is not None:
        src = source_params if source_params is not None else params
        src_cfg = source_cfg if source_cfg is not None else cfg
        X = attacks.generate(src, src_cfg, data.features, data.labels, atk, loss_cfg, method=method,
                             seed=seed, threads=threads, progress=progress)
    C = cfg.class_count
    confusion = np.zeros((C, C), dtype=np.int64)
    for x, y in zip(X, data.labels):
        confusion[int(y), net.forward(params, cfg, x).prediction] += 1
    return float(np.trace(confusion)) / len(data), confusion
