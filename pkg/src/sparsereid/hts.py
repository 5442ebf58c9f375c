"""Hierarchical token sparsification.

Per stage a small MLP scores every image token, a straight-through Gumbel
sample turns the scores into a binary keep decision, and the running decision
mask gates attention so dropped tokens influence nobody but themselves. At
inference the same scores drive hard top-k pruning.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ContractError,
    Tensor,
    as_tensor,
    concat,
    gelu,
    log_softmax_rows,
    matmul,
    softmax_rows,
    straight_through,
    take_tokens,
)

logger = logging.getLogger(__name__)

GUMBEL_TAU = 1.0
REWEIGHT_INIT = 0.5


@dataclass(frozen=True)
class SparsifySchedule:
    """Where the token predictors sit and how many tokens survive each.

    Stage ``s`` (0-based) runs before block ``stage_layers[s]`` and targets a
    cumulative keep ratio of ``base_ratio ** (s + 1)``.
    """

    stage_layers: tuple
    base_ratio: float

    def __post_init__(self):
        layers = tuple(int(v) for v in self.stage_layers)
        object.__setattr__(self, "stage_layers", layers)
        if not layers:
            raise ValueError("sparsify schedule needs at least one stage")
        if any(b <= a for a, b in zip(layers, layers[1:])) or layers[0] < 0:
            raise ValueError(f"stage layers must be strictly increasing, got {layers}")
        if not 0.0 < self.base_ratio <= 1.0:
            raise ValueError(f"keep ratio must lie in (0, 1], got {self.base_ratio}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_layers)

    @property
    def stage_ratios(self) -> tuple:
        return tuple(self.base_ratio ** (s + 1) for s in range(self.num_stages))

    def keep_counts(self, num_tokens: int) -> tuple:
        return tuple(keep_count(r, num_tokens) for r in self.stage_ratios)

    def stage_at(self, layer: int):
        try:
            return self.stage_layers.index(layer)
        except ValueError:
            return None


def keep_count(ratio: float, num_tokens: int) -> int:
    # ratio ** s is inexact in binary; don't let 7.000000001 round up to 8
    return min(num_tokens, max(1, math.ceil(ratio * num_tokens - 1e-9)))


@dataclass
class DecisionState:
    """Keep probabilities and cumulative masks, one entry per stage run so far."""

    pis: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    @property
    def pi(self):
        return self.pis[-1] if self.pis else None

    @property
    def mask(self):
        return self.masks[-1] if self.masks else None

    def record(self, pi, mask) -> None:
        self.pis.append(pi)
        self.masks.append(mask)


def init_predictor(embed_dim: int, rng, std: float = 0.02) -> dict:
    from .vit import trunc_normal

    hidden = max(1, embed_dim // 2)
    return {
        "fc1.weight": trunc_normal(rng, (embed_dim, hidden), std),
        "fc1.bias": np.zeros(hidden),
        "fc2.weight": trunc_normal(rng, (hidden, 2), std),
        "fc2.bias": np.zeros(2),
    }


def predictor_logits(tokens, mask, params: dict, prefix: str) -> Tensor:
    """Two-way drop/keep logits for image tokens ``B x N x C``."""
    x = as_tensor(tokens)
    if mask is not None:
        x = x * as_tensor(mask).reshape(x.shape[0], x.shape[1], 1)
    h = gelu(matmul(x, params[prefix + "fc1.weight"]) + params[prefix + "fc1.bias"])
    return matmul(h, params[prefix + "fc2.weight"]) + params[prefix + "fc2.bias"]


def predict_keep_probs(tokens, mask, params: dict, prefix: str = "") -> Tensor:
    """``pi[..., 1]`` is the keep probability, ``pi[..., 0]`` the drop probability."""
    if mask is not None:
        m = np.asarray(as_tensor(mask).data)
        if not np.all((m == 0) | (m == 1)):
            raise ContractError("decision mask must be binary")
    return softmax_rows(predictor_logits(tokens, mask, params, prefix))


def gumbel_noise(shape, rng) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    return -np.log(-np.log(u))


def gumbel_sample_logits(log_pi, tau: float = GUMBEL_TAU, rng=None, noise=None,
                         hard: bool = True) -> Tensor:
    """Keep decision from two-way log-probabilities ``B x N x 2``.

    With ``hard`` the forward value is the one-hot arg-max (exactly 0/1) and the
    gradient is that of the tempered softmax relaxation.
    """
    if tau <= 0:
        raise ContractError("Gumbel temperature must be positive")
    log_pi = as_tensor(log_pi)
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = gumbel_noise(log_pi.shape, rng)
    noise = np.asarray(noise, dtype=log_pi.dtype)
    soft = softmax_rows((log_pi + noise) * (1.0 / tau))
    keep_soft = soft[..., 1]
    if not hard:
        return keep_soft
    with np.errstate(invalid="ignore"):
        perturbed = log_pi.data + noise
    keep_hard = (perturbed[..., 1] > perturbed[..., 0]).astype(log_pi.dtype)
    return straight_through(keep_hard, keep_soft)


def gumbel_sample(pi, tau: float = GUMBEL_TAU, rng=None, noise=None, hard: bool = True) -> Tensor:
    """Binary keep mask drawn from probabilities ``pi`` (``... x 2``)."""
    pi = as_tensor(pi)
    with np.errstate(divide="ignore"):
        log_pi = pi.log() if pi.requires_grad else Tensor(np.log(pi.data))
    return gumbel_sample_logits(log_pi, tau, rng=rng, noise=noise, hard=hard)


def update_mask(mask, decision):
    """Once a token is dropped it stays dropped."""
    if mask is None:
        return decision
    if isinstance(mask, Tensor) or isinstance(decision, Tensor):
        return as_tensor(mask) * as_tensor(decision)
    mask, decision = np.asarray(mask), np.asarray(decision)
    if mask.shape != decision.shape:
        raise ContractError(f"mask shapes differ: {mask.shape} vs {decision.shape}")
    return mask * decision


def attention_gate(mask, dtype=None) -> Tensor:
    """``G`` with ``G_ii = 1`` and ``G_ij = mask_j`` off the diagonal.

    ``mask`` covers image tokens only (``B x N``); the class token at sequence
    index 0 is always kept. Returns ``B x 1 x (N+1) x (N+1)``.
    """
    mask = as_tensor(mask)
    b, n = mask.shape
    dtype = mask.dtype if dtype is None else dtype
    full = concat([Tensor(np.ones((b, 1), dtype=dtype)), mask], axis=1)
    eye = np.eye(n + 1, dtype=dtype)
    return full.reshape(b, 1, 1, n + 1) * (1.0 - eye) + eye


def masked_attention(q, k, v, mask=None, return_weights: bool = False):
    """Scaled dot-product attention over ``B x h x T x dh`` with optional token mask.

    Rows are renormalised over the gated entries only, so a token whose mask is
    0 is invisible to every other token but still attends to itself.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = matmul(q, k.swapaxes(-1, -2)) * scale
    if mask is None:
        weights = softmax_rows(logits)
    else:
        gate = attention_gate(mask, dtype=logits.dtype)
        g = np.broadcast_to(gate.data, logits.shape)
        if not np.all((g > 0).any(axis=-1)):
            raise ContractError("attention row with no admissible key")
        with np.errstate(invalid="ignore"):
            shift = np.where(g > 0, logits.data, -np.inf).max(axis=-1, keepdims=True)
        scores = (logits - shift).exp() * gate
        weights = scores / scores.sum(axis=-1, keepdims=True)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def class_attention(q, k) -> Tensor:
    """Head-averaged softmax of the class query against all keys: ``B x T``."""
    q, k = as_tensor(q), as_tensor(k)
    scale = 1.0 / math.sqrt(q.shape[-1])
    row = matmul(q[:, :, 0:1, :], k.swapaxes(-1, -2)) * scale
    return softmax_rows(row).mean(axis=1).reshape(q.shape[0], k.shape[2])


def class_attn_reweight(x, attn_cls, lam) -> Tensor:
    """``x + lam * concat(x_cls, attn_i * x_i)``; training-time only."""
    x, attn_cls, lam = as_tensor(x), as_tensor(attn_cls), as_tensor(lam)
    if attn_cls.shape != x.shape[:2]:
        raise ContractError(f"class attention {attn_cls.shape} does not match tokens {x.shape[:2]}")
    b = x.shape[0]
    weights = concat([Tensor(np.ones((b, 1), dtype=x.dtype)), attn_cls[:, 1:]], axis=1)
    return x + lam.reshape(1, 1, 1) * (x * weights.reshape(b, -1, 1))


def ratio_loss(masks, schedule: SparsifySchedule) -> Tensor:
    """Mean over the batch of the summed squared gap between target and realised keep rate."""
    if len(masks) != schedule.num_stages:
        raise ContractError(f"expected {schedule.num_stages} stage masks, got {len(masks)}")
    total = None
    for target, mask in zip(schedule.stage_ratios, masks):
        gap = (target - as_tensor(mask).mean(axis=1)) ** 2
        total = gap if total is None else total + gap
    return total.mean()


def top_keep(keep_prob: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` largest scores per row, lower index on ties, ascending."""
    order = np.argsort(-keep_prob, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def prune_for_inference(tokens, keep_prob, stage_ratio: float, n_original: int, kept=None):
    """Physically drop image tokens, keeping ``ceil(stage_ratio * n_original)``.

    ``tokens`` is ``B x (M+1) x C`` with the class token first; ``keep_prob``
    scores the M surviving image tokens. ``kept`` maps surviving positions to
    original grid indices. Returns the pruned tokens and the new index map.
    """
    tokens = as_tensor(tokens)
    b, m = tokens.shape[0], tokens.shape[1] - 1
    keep_prob = np.asarray(as_tensor(keep_prob).data)
    if kept is None:
        kept = np.broadcast_to(np.arange(m), (b, m))
    k = keep_count(stage_ratio, n_original)
    if k >= m:
        if k > m:
            logger.info("asked to keep %d tokens but only %d survive; keeping all", k, m)
        return tokens, np.asarray(kept)
    pos = top_keep(keep_prob, k)
    idx = np.concatenate([np.zeros((b, 1), dtype=np.intp), pos + 1], axis=1)
    return take_tokens(tokens, idx), np.take_along_axis(np.asarray(kept), pos, axis=1)
