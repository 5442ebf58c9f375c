"""Training objective: BN-neck head, identity losses, and feature/logit distillation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ContractError,
    Tensor,
    as_tensor,
    log_softmax_rows,
    matmul,
    where,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LABEL_SMOOTHING = 0.1
TRIPLET_MARGIN = 0.3


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_ratio: float = 2.0
    kd_lambda: float = 0.1
    temperature: float = 1.0

    @classmethod
    def small_dataset(cls) -> "LossWeights":
        return cls(alpha=2.0, beta=1.0)


@dataclass
class LossParts:
    """Scalar loss components of one step; ``total`` is their weighted sum."""

    cls: float = 0.0
    tri: float = 0.0
    kl: float = 0.0
    feat: float = 0.0
    ratio: float = 0.0
    total: float = 0.0

    HEADER = "step,L_cls,L_tri,L_KL,L_feat,L_ratio,L_total"

    def csv_row(self, step: int) -> str:
        vals = [self.cls, self.tri, self.kl, self.feat, self.ratio, self.total]
        return ",".join([str(step)] + [repr(float(v)) for v in vals])


# ---------------------------------------------------------------------------
# head


def batch_norm(f, params: dict, prefix: str = "head.bn.", training: bool = True) -> Tensor:
    """Batch norm over the feature axis of ``B x C``; updates running stats in training."""
    f = as_tensor(f)
    rm, rv = params[prefix + "running_mean"], params[prefix + "running_var"]
    if training:
        if f.shape[0] < 2:
            raise ContractError("batch norm in training mode needs at least two samples")
        mu = f.mean(axis=0, keepdims=True)
        xc = f - mu
        var = (xc * xc).mean(axis=0, keepdims=True)
        n = f.shape[0]
        rm.data[...] = (1 - BN_MOMENTUM) * rm.data + BN_MOMENTUM * mu.data[0]
        rv.data[...] = (1 - BN_MOMENTUM) * rv.data + BN_MOMENTUM * var.data[0] * n / (n - 1)
        xhat = xc / (var + BN_EPS).sqrt()
    else:
        xhat = (f - rm.data) / np.sqrt(rv.data + BN_EPS)
    return xhat * params[prefix + "weight"] + params[prefix + "bias"]


def classifier_logits(f, params: dict, bn_neck: bool = True, training: bool = True):
    """Logits ``W . BN(f)`` (student) or ``W . f`` (teacher, no BN); returns (logits, neck)."""
    neck = batch_norm(f, params, training=training) if bn_neck else as_tensor(f)
    w = params["head.classifier.weight"]
    return matmul(neck, w.transpose(1, 0)), neck


# ---------------------------------------------------------------------------
# alignment


def interpolation_matrix(c_from: int, c_to: int) -> np.ndarray:
    """``M`` such that ``f @ M`` linearly resamples ``f`` onto ``c_to`` points.

    Source samples sit at ``j / (c_from - 1)`` on [0, 1]; targets are
    ``linspace(0, 1, c_to)``. A single source value is extended as a constant.
    """
    if c_from < 1 or c_to < 1:
        raise ContractError(f"feature sizes must be positive, got {c_from} -> {c_to}")
    m = np.zeros((c_from, c_to))
    if c_from == 1:
        m[0, :] = 1.0
        return m
    pos = np.linspace(0.0, 1.0, c_to) * (c_from - 1)
    lo = np.minimum(np.floor(pos).astype(int), c_from - 2)
    frac = pos - lo
    cols = np.arange(c_to)
    m[lo, cols] += 1.0 - frac
    m[lo + 1, cols] += frac
    return m


def align_features(f, c_to: int):
    """Resample the trailing axis of ``f`` to ``c_to`` entries with no parameters."""
    if isinstance(f, Tensor):
        if f.shape[-1] == c_to:
            return f
        m = interpolation_matrix(f.shape[-1], c_to).astype(f.dtype)
        return matmul(f, Tensor(m))
    f = np.asarray(f)
    if f.shape[-1] == c_to:
        return f
    return f @ interpolation_matrix(f.shape[-1], c_to).astype(f.dtype)


ALIGN_METHODS = ("interpolation", "linear")
ALIGN_DIRECTIONS = ("T->S", "S->T")


def init_linear_align(c_from: int, c_to: int, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(c_from)
    return {
        "align.weight": Tensor(rng.uniform(-bound, bound, (c_from, c_to)).astype(dtype),
                               requires_grad=True, name="align.weight"),
        "align.bias": Tensor(rng.uniform(-bound, bound, c_to).astype(dtype),
                             requires_grad=True, name="align.bias"),
    }


def feature_gap(f_student, f_teacher, method: str = "interpolation", direction: str = "T->S",
                params: dict | None = None) -> Tensor:
    """Batch mean of ``||a - b||^2`` after bringing both features to one size.

    ``T->S`` maps the teacher feature onto the student width, ``S->T`` the
    student onto the teacher width. The teacher side never carries gradient.
    """
    if method not in ALIGN_METHODS or direction not in ALIGN_DIRECTIONS:
        raise ContractError(f"unknown alignment {method!r} / {direction!r}")
    fs = as_tensor(f_student)
    ft = as_tensor(f_teacher).detach()
    cs, ct = fs.shape[-1], ft.shape[-1]
    if direction == "T->S":
        src, c_to = ft, cs
    else:
        src, c_to = fs, ct
    if method == "interpolation":
        mapped = align_features(src, c_to)
    else:
        mapped = matmul(src, params["align.weight"]) + params["align.bias"]
    if direction == "T->S":
        diff = fs - mapped
    else:
        diff = mapped - ft
    return (diff * diff).sum(axis=-1).mean()


# ---------------------------------------------------------------------------
# losses


def kl_logits_loss(g_student, g_teacher, temperature: float = 1.0,
                   student_first: bool = True) -> Tensor:
    """Batch-mean KL divergence between temperature-softened class distributions.

    ``student_first`` computes KL(p_s || p_t); otherwise KL(p_t || p_s). The
    teacher logits are treated as constants either way.
    """
    gs = as_tensor(g_student)
    gt = as_tensor(g_teacher).detach()
    if gs.shape != gt.shape:
        raise ContractError(f"logit shapes differ: {gs.shape} vs {gt.shape}")
    log_ps = log_softmax_rows(gs * (1.0 / temperature))
    log_pt = log_softmax_rows(gt * (1.0 / temperature))
    if student_first:
        kl = (log_ps.exp() * (log_ps - log_pt)).sum(axis=-1)
    else:
        kl = (log_pt.exp() * (log_pt - log_ps)).sum(axis=-1)
    return kl.mean()


def npkd_loss(f_student, f_teacher, g_student, g_teacher, weights: LossWeights,
              method: str = "interpolation", direction: str = "T->S", params=None,
              student_first: bool = True):
    """``kd_lambda * KL + feature gap``; returns (total, kl, feat)."""
    kl = kl_logits_loss(g_student, g_teacher, weights.temperature, student_first)
    feat = feature_gap(f_student, f_teacher, method, direction, params)
    return kl * weights.kd_lambda + feat, kl, feat


def cls_loss(logits, labels, smoothing: float = LABEL_SMOOTHING) -> Tensor:
    """Label-smoothed cross entropy, batch mean."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"labels must lie in [0, {k}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    target = np.full(logits.shape, smoothing / k, dtype=logits.dtype)
    target[np.arange(len(labels)), labels] += 1.0 - smoothing
    return -(log_softmax_rows(logits) * target).sum(axis=-1).mean()


def pairwise_euclidean(f) -> Tensor:
    f = as_tensor(f)
    sq = (f * f).sum(axis=1, keepdims=True)
    d2 = sq + sq.transpose(1, 0) - matmul(f, f.transpose(1, 0)) * 2.0
    d2 = where(d2.data > 1e-12, d2, Tensor(np.full(d2.shape, 1e-12, dtype=d2.dtype)))
    return d2.sqrt()


def triplet_loss(f, labels, margin: float = TRIPLET_MARGIN) -> Tensor:
    """Batch-hard triplet loss on Euclidean distances."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    if same.all():
        raise ContractError("triplet loss needs at least two identities in the batch")
    dist = pairwise_euclidean(f)
    big = float(dist.data.max()) + 1.0
    pos = where(same, dist, Tensor(np.full(dist.shape, -1.0, dtype=dist.dtype))).max(axis=1)
    neg = where(~same, dist, Tensor(np.full(dist.shape, big, dtype=dist.dtype))).min(axis=1)
    return (pos - neg + margin).relu().mean()


def total_loss(l_kd, l_ratio, l_cls, l_tri, weights: LossWeights):
    """``alpha * (L_KD + lambda_ratio * L_ratio) + beta * (L_cls + L_tri)``."""
    return (l_kd + l_ratio * weights.lambda_ratio) * weights.alpha + (l_cls + l_tri) * weights.beta
