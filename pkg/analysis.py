#!/usr/bin/env python3
"""
Diagnostics for trained models: the CE input-gradient decomposition over class prototypes,
where untargeted adversaries land (hard-class-pair bias), cosine statistics, prototype norms
and embedding export for external t-SNE.
"""
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import attacks
import data as ds
import linalg
import losses
import net

log = logging.getLogger(__name__)


# ==========================
# gradient decomposition
# ==========================
@dataclass
class Lemma1Entry:
    label: int
    sigma_true: float
    grad_norm: float
    true_term_norm: float
    exact_residual_norm: float
    exact_relative_residual: float
    residual_norm: float
    relative_residual: float


@dataclass
class Lemma1Report:
    entries: list = field(default_factory=list)
    median_sigma_true: float = 0.0
    median_exact_relative_residual: float = 0.0
    median_relative_residual: float = 0.0
    max_exact_relative_residual: float = 0.0

    def to_dict(self):
        return asdict(self)


def _rel(num, den):
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


def lemma1_residual(params, cfg: net.NetConfig, x, label) -> Lemma1Entry:
    """
    ∇_x L_CE = (σ_i − 1)·∇_x logit_i + Σ_{j≠i} σ_j·∇_x logit_j, each term obtained as a
    vector-Jacobian product with a crafted head seed. The oracle form keeps only the sum.
    """
    trace = net.forward(params, cfg, x)
    _, g = losses.ce_loss(trace.logits, label)
    _, grad = net.backward(params, cfg, trace, g)

    sigma = float(trace.probs[label])
    seed_true = np.zeros_like(trace.probs)
    seed_true[label] = sigma - 1.0
    seed_false = trace.probs.copy()
    seed_false[label] = 0.0
    _, t_true = net.backward(params, cfg, trace, seed_true)
    _, t_false = net.backward(params, cfg, trace, seed_false)
    unit = np.zeros_like(trace.probs)
    unit[label] = 1.0
    _, d_true = net.backward(params, cfg, trace, unit)

    gn = float(np.linalg.norm(grad))
    exact = float(np.linalg.norm(grad - t_true - t_false))
    resid = float(np.linalg.norm(grad - t_false))
    return Lemma1Entry(
        label=int(label),
        sigma_true=sigma,
        grad_norm=gn,
        true_term_norm=float(np.linalg.norm(d_true)),
        exact_residual_norm=exact,
        exact_relative_residual=_rel(exact, gn),
        residual_norm=resid,
        relative_residual=_rel(resid, gn),
    )


def lemma1_report(params, cfg, data: ds.Dataset, max_samples=None) -> Lemma1Report:
    n = len(data) if max_samples is None else min(len(data), max_samples)
    entries = [lemma1_residual(params, cfg, data.features[i], int(data.labels[i])) for i in range(n)]
    rep = Lemma1Report(entries=entries)
    if entries:
        rep.median_sigma_true = float(np.median([e.sigma_true for e in entries]))
        rep.median_exact_relative_residual = float(np.median([e.exact_relative_residual for e in entries]))
        rep.median_relative_residual = float(np.median([e.relative_residual for e in entries]))
        rep.max_exact_relative_residual = float(max(e.exact_relative_residual for e in entries))
    return rep


# ==========================
# adversarial bias
# ==========================
@dataclass
class BiasReport:
    confusion: list
    per_class_top_target: list
    hcp_share: float
    hcp_share_defined: bool
    accuracy: float

    def to_dict(self):
        return asdict(self)


def bias_from_confusion(confusion, hard_pairs=None) -> BiasReport:
    conf = np.asarray(confusion, dtype=np.int64)
    C = conf.shape[0]
    tops = []
    for i in range(C):
        off = conf[i].copy()
        off[i] = 0
        wrong = int(off.sum())
        if wrong == 0:
            tops.append({"class": i, "target": None, "share": 0.0, "misclassified": 0, "defined": False})
            continue
        j = int(np.argmax(off))
        tops.append({"class": i, "target": j, "share": float(off[j] / wrong), "misclassified": wrong, "defined": True})
    total_wrong = int(conf.sum() - np.trace(conf))
    hcp_hits = 0
    if hard_pairs:
        hcp_hits = sum(int(conf[int(i), int(j)]) for i, j in hard_pairs.items())
    total = int(conf.sum())
    return BiasReport(
        confusion=conf.tolist(),
        per_class_top_target=tops,
        hcp_share=hcp_hits / total_wrong if total_wrong else 0.0,
        hcp_share_defined=bool(total_wrong and hard_pairs),
        accuracy=float(np.trace(conf)) / total if total else 0.0,
    )


def adv_confusion(params, cfg, data: ds.Dataset, atk: attacks.AttackConfig, loss_cfg=None,
                  hard_pairs=None, seed=0, threads=1, progress=False) -> BiasReport:
    """Attack every sample and tally where the adversarial predictions land."""
    X = attacks.generate(params, cfg, data.features, data.labels, atk, loss_cfg, seed=seed,
                         threads=threads, progress=progress)
    C = cfg.class_count
    conf = np.zeros((C, C), dtype=np.int64)
    for x, y in zip(X, data.labels):
        conf[int(y), net.forward(params, cfg, x).prediction] += 1
    if hard_pairs is None:
        hard_pairs = data.meta.get("hard_pairs") or detect_hard_pairs(cos_stats(params, cfg, data))
    return bias_from_confusion(conf, hard_pairs)


# ==========================
# cosine monitoring / prototype norms
# ==========================
@dataclass
class CosStats:
    mean_cos_true: list
    mean_cos_max_false: list
    cos_matrix: list
    counts: list

    def to_dict(self):
        return asdict(self)


def cos_stats(params, cfg, data: ds.Dataset) -> CosStats:
    C = cfg.class_count
    sums = np.zeros((C, C))
    max_false = np.zeros(C)
    counts = np.zeros(C, dtype=np.int64)
    for x, y in zip(data.features, data.labels):
        y = int(y)
        c = net.forward(params, cfg, x).cosines
        sums[y] += c
        if C > 1:
            max_false[y] += np.max(np.delete(c, y))
        counts[y] += 1
    safe = np.maximum(counts, 1)
    mat = sums / safe[:, None]
    return CosStats(
        mean_cos_true=np.diag(mat).tolist(),
        mean_cos_max_false=(max_false / safe).tolist(),
        cos_matrix=mat.tolist(),
        counts=counts.tolist(),
    )


def detect_hard_pairs(stats: CosStats):
    """class -> false class with the largest mean cosine."""
    mat = np.asarray(stats.cos_matrix, dtype=np.float64)
    out = {}
    for i in range(mat.shape[0]):
        if stats.counts[i] == 0 or mat.shape[0] < 2:
            continue
        row = mat[i].copy()
        row[i] = -np.inf
        out[i] = int(np.argmax(row))
    return out


def weight_norms(params, head_mode="plain"):
    W = params.head_W
    if head_mode == "hypersphere":
        # the head only ever sees unit prototypes
        W = np.stack([linalg.l2_normalize(W[:, j]) for j in range(W.shape[1])], axis=1)
    norms = np.linalg.norm(W, axis=0)
    mean = float(norms.mean())
    std = float(norms.std())
    return {"norms": norms.tolist(), "mean": mean, "std": std, "cv": std / mean if mean else 0.0}


# ==========================
# embedding export
# ==========================
def export_embeddings(params, cfg, data: ds.Dataset, path, normalized=False):
    m = cfg.embedding_dim
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label"] + [f"e{k}" for k in range(m)])
            for x, y in zip(data.features, data.labels):
                t = net.forward(params, cfg, x)
                z = t.effective_embedding if normalized else t.embedding
                w.writerow([int(y)] + [repr(float(v)) for v in z])
    except OSError as e:
        raise OSError(f"cannot write embeddings to {path}: {e}") from e
    log.info("wrote %d embeddings to %s", len(data), path)
    return path


def read_embeddings(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    values = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    return header, labels, values
