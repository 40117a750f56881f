#!/usr/bin/env python3
"""
Fully-connected classifier with an explicit forward trace and hand-written backward pass.

Layout: hidden layer k computes a_{k+1} = act(a_k @ W_k + b_k); the last hidden activation
is the embedding z (length m); the head is either plain (z @ W + b) or hypersphere
(s·z/‖z‖ @ W/‖W_col‖, no bias) so that logits_j = s·cos(θ_j).
"""
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

import linalg

NORM_EPS = 1e-12


class NetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    layer_sizes: list[int] = [784, 128, 64, 10]
    activation: Literal["relu", "tanh"] = "relu"
    head_mode: Literal["plain", "hypersphere"] = "plain"
    scale_s: float = 5.0

    @field_validator("layer_sizes")
    @classmethod
    def _check_sizes(cls, v):
        if len(v) < 2:
            raise ValueError("layer_sizes needs at least input and class count")
        if any(n < 1 for n in v):
            raise ValueError(f"layer sizes must be positive, got {v}")
        return v

    @field_validator("scale_s")
    @classmethod
    def _check_scale(cls, v):
        if not v > 0:
            raise ValueError("scale_s must be > 0")
        return v

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def embedding_dim(self):
        return self.layer_sizes[-2]

    @property
    def class_count(self):
        return self.layer_sizes[-1]


@dataclass
class ModelParams:
    hidden_weights: list
    hidden_biases: list
    head_W: np.ndarray
    head_bias: np.ndarray

    def named_arrays(self):
        out = {}
        for k, (w, b) in enumerate(zip(self.hidden_weights, self.hidden_biases)):
            out[f"hidden_weights.{k}"] = w
            out[f"hidden_biases.{k}"] = b
        out["head_W"] = self.head_W
        out["head_bias"] = self.head_bias
        return out

    @classmethod
    def from_named_arrays(cls, arrays):
        n = sum(1 for k in arrays if k.startswith("hidden_weights."))
        return cls(
            hidden_weights=[np.ascontiguousarray(arrays[f"hidden_weights.{k}"], dtype=np.float64) for k in range(n)],
            hidden_biases=[np.ascontiguousarray(arrays[f"hidden_biases.{k}"], dtype=np.float64) for k in range(n)],
            head_W=np.ascontiguousarray(arrays["head_W"], dtype=np.float64),
            head_bias=np.ascontiguousarray(arrays["head_bias"], dtype=np.float64),
        )

    def map(self, fn):
        return ModelParams.from_named_arrays({k: fn(v) for k, v in self.named_arrays().items()})

    def copy(self):
        return self.map(np.copy)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def shapes(self):
        return {k: tuple(v.shape) for k, v in self.named_arrays().items()}


# gradients share the parameter layout
ParamGrads = ModelParams


@dataclass
class ForwardTrace:
    x: np.ndarray
    head_mode: str
    scale_s: float
    pre_activations: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    embedding: np.ndarray = None
    embedding_norm: float = 0.0
    prototype_norms: np.ndarray = None
    effective_embedding: np.ndarray = None
    effective_W: np.ndarray = None
    logits: np.ndarray = None
    probs: np.ndarray = None
    cosines: np.ndarray = None

    @property
    def prediction(self):
        return int(np.argmax(self.probs))


def expected_shapes(cfg: NetConfig):
    sizes = cfg.layer_sizes
    shapes = {}
    for k in range(len(sizes) - 2):
        shapes[f"hidden_weights.{k}"] = (sizes[k], sizes[k + 1])
        shapes[f"hidden_biases.{k}"] = (sizes[k + 1],)
    shapes["head_W"] = (sizes[-2], sizes[-1])
    shapes["head_bias"] = (sizes[-1],)
    return shapes


def check_params(params: ModelParams, cfg: NetConfig):
    got = params.shapes()
    want = expected_shapes(cfg)
    if got != want:
        raise ValueError(f"params do not match layer_sizes {cfg.layer_sizes}: got {got}, want {want}")
    if cfg.head_mode == "hypersphere" and np.any(params.head_bias != 0.0):
        raise ValueError("hypersphere head must have a zero bias")


def init_params(cfg: NetConfig, seed: int) -> ModelParams:
    """He (relu) or LeCun (tanh) normal init, zero biases."""
    rng = np.random.default_rng([seed, 0])
    gain = 2.0 if cfg.activation == "relu" else 1.0
    sizes = cfg.layer_sizes
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-2], sizes[1:-1]):
        ws.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    head_W = rng.normal(0.0, np.sqrt(gain / sizes[-2]), size=(sizes[-2], sizes[-1]))
    return ModelParams(ws, bs, head_W, np.zeros(sizes[-1]))


def _act(h, kind):
    if kind == "relu":
        return np.maximum(h, 0.0)
    return np.tanh(h)


def _act_grad(h, a, kind):
    if kind == "relu":
        return (h > 0.0).astype(np.float64)
    return 1.0 - a * a


def softmax(logits):
    e = np.exp(logits - np.max(logits))
    return e / np.sum(e)


def head_forward(params: ModelParams, cfg: NetConfig, z, trace: ForwardTrace):
    W = params.head_W
    zn = float(np.linalg.norm(z))
    wn = np.linalg.norm(W, axis=0)
    cos = linalg.matmul(z, W) / ((zn + NORM_EPS) * (wn + NORM_EPS))
    trace.embedding = z
    trace.embedding_norm = zn
    trace.prototype_norms = wn
    trace.cosines = np.clip(cos, -1.0, 1.0)
    if cfg.head_mode == "hypersphere":
        trace.effective_embedding = linalg.l2_normalize(z, cfg.scale_s, eps=NORM_EPS)
        trace.effective_W, _ = linalg.normalize_columns(W, eps=NORM_EPS)
        trace.logits = linalg.matmul(trace.effective_embedding, trace.effective_W)
    else:
        trace.effective_embedding = z
        trace.effective_W = W
        trace.logits = linalg.matmul(z, W) + params.head_bias
    trace.probs = softmax(trace.logits)
    return trace


def forward(params: ModelParams, cfg: NetConfig, x) -> ForwardTrace:
    x = linalg.as_vector(x)
    if x.shape[0] != cfg.input_dim:
        raise ValueError(f"input length {x.shape[0]} != input dim {cfg.input_dim}")
    trace = ForwardTrace(x=x, head_mode=cfg.head_mode, scale_s=cfg.scale_s)
    a = x
    trace.activations.append(a)
    for W, b in zip(params.hidden_weights, params.hidden_biases):
        h = linalg.matmul(a, W) + b
        a = _act(h, cfg.activation)
        trace.pre_activations.append(h)
        trace.activations.append(a)
    return head_forward(params, cfg, a, trace)


def _normalize_backward(v, norm, dout, scale):
    """VJP of v -> scale·v/(‖v‖+eps)."""
    denom = norm + NORM_EPS
    if norm == 0.0:
        return (scale / denom) * dout
    return (scale / denom) * (dout - v * (v @ dout) / (denom * norm))


def backward(params: ModelParams, cfg: NetConfig, trace: ForwardTrace, dL_dlogits):
    """Reverse pass of logits·dL_dlogits; returns (ParamGrads, input_grad)."""
    g = linalg.as_vector(dL_dlogits)
    if trace.head_mode != cfg.head_mode or len(trace.pre_activations) != len(params.hidden_weights):
        raise ValueError("trace was not produced by these params/config")
    if g.shape != trace.logits.shape or trace.x.shape[0] != cfg.input_dim:
        raise ValueError(f"dL_dlogits shape {g.shape} does not match logits {trace.logits.shape}")

    W = params.head_W
    z = trace.embedding
    if cfg.head_mode == "hypersphere":
        d_eff_z = linalg.matmul(trace.effective_W, g)
        d_eff_W = np.outer(trace.effective_embedding, g)
        dz = _normalize_backward(z, trace.embedding_norm, d_eff_z, cfg.scale_s)
        dW = np.empty_like(W)
        for j in range(W.shape[1]):
            dW[:, j] = _normalize_backward(W[:, j], trace.prototype_norms[j], d_eff_W[:, j], 1.0)
        db = np.zeros_like(params.head_bias)
    else:
        dz = linalg.matmul(W, g)
        dW = np.outer(z, g)
        db = g.copy()

    n = len(params.hidden_weights)
    dws, dbs = [None] * n, [None] * n
    da = dz
    for k in reversed(range(n)):
        dh = da * _act_grad(trace.pre_activations[k], trace.activations[k + 1], cfg.activation)
        dws[k] = np.outer(trace.activations[k], dh)
        dbs[k] = dh
        da = linalg.matmul(params.hidden_weights[k], dh)
    return ModelParams(dws, dbs, dW, db), da


def min_abs_preactivation(trace: ForwardTrace):
    if not trace.pre_activations:
        return np.inf
    return float(min(np.min(np.abs(h)) for h in trace.pre_activations))
