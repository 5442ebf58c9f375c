"""Toy vision transformer backbone shared by teacher and student."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hts
from .numerics import (
    Tensor,
    as_tensor,
    concat,
    gelu,
    get_default_dtype,
    layer_norm,
    log_softmax_rows,
    matmul,
    softmax_rows,
    take_tokens,
)

LN_EPS = 1e-6
# Per-channel input statistics (the usual ImageNet values); images arrive in [0, 1].
PIXEL_MEAN = np.array([0.485, 0.456, 0.406])
PIXEL_STD = np.array([0.229, 0.224, 0.225])


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    height: int
    width: int
    channels: int = 3
    patch: int = 16

    def __post_init__(self):
        if self.patch <= 0 or self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"patch stride {self.patch} must divide image size {self.height}x{self.width}")

    @property
    def grid(self) -> tuple:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        return (self.height * self.width) // (self.patch * self.patch)


@dataclass(frozen=True)
class ModelConfig:
    patch: PatchConfig
    embed_dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 0
    sparsify: hts.SparsifySchedule | None = None
    bn_neck: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.sparsify is not None and self.sparsify.stage_layers[-1] >= self.depth:
            raise ConfigError(
                f"sparsify stages {self.sparsify.stage_layers} exceed depth {self.depth}")

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def with_ratio(self, ratio: float) -> "ModelConfig":
        """Same architecture, different keep ratio (weights stay compatible)."""
        if self.sparsify is None:
            raise ConfigError("model has no sparsify schedule")
        sched = hts.SparsifySchedule(self.sparsify.stage_layers, ratio)
        return ModelConfig(self.patch, self.embed_dim, self.depth, self.heads, self.mlp_ratio,
                           self.num_classes, sched, self.bn_neck)


@dataclass
class TokenBatch:
    tokens: Tensor
    decision: hts.DecisionState | None = None


@dataclass
class ForwardOutput:
    feature: Tensor
    decision: hts.DecisionState | None = None
    attn_cls: Tensor | None = None
    kept: list = field(default_factory=list)
    token_counts: list = field(default_factory=list)


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh weights: truncated normal projections and token embeddings, zero biases."""
    rng = np.random.default_rng(seed)
    c, p = cfg.embed_dim, cfg.patch
    patch_dim = p.channels * p.patch * p.patch
    raw = {
        "patch_embed.weight": trunc_normal(rng, (patch_dim, c)),
        "patch_embed.bias": np.zeros(c),
        "cls_token": trunc_normal(rng, (1, 1, c)),
        "pos_embed": trunc_normal(rng, (1, p.num_patches + 1, c)),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        raw.update({
            b + "norm1.weight": np.ones(c), b + "norm1.bias": np.zeros(c),
            b + "attn.qkv.weight": trunc_normal(rng, (c, 3 * c)), b + "attn.qkv.bias": np.zeros(3 * c),
            b + "attn.proj.weight": trunc_normal(rng, (c, c)), b + "attn.proj.bias": np.zeros(c),
            b + "norm2.weight": np.ones(c), b + "norm2.bias": np.zeros(c),
            b + "mlp.fc1.weight": trunc_normal(rng, (c, cfg.hidden_dim)),
            b + "mlp.fc1.bias": np.zeros(cfg.hidden_dim),
            b + "mlp.fc2.weight": trunc_normal(rng, (cfg.hidden_dim, c)),
            b + "mlp.fc2.bias": np.zeros(c),
        })
    raw["norm.weight"] = np.ones(c)
    raw["norm.bias"] = np.zeros(c)
    if cfg.sparsify is not None:
        for s in range(cfg.sparsify.num_stages):
            for name, value in hts.init_predictor(c, rng).items():
                raw[f"predictors.{s}.{name}"] = value
        raw["reweight.lambda"] = np.array([hts.REWEIGHT_INIT])
    if cfg.num_classes:
        if cfg.bn_neck:
            raw["head.bn.weight"] = np.ones(c)
            raw["head.bn.bias"] = np.zeros(c)
        raw["head.classifier.weight"] = rng.normal(0.0, 0.001, size=(cfg.num_classes, c))
    dtype = get_default_dtype()
    params = {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k) for k, v in raw.items()}
    if cfg.num_classes and cfg.bn_neck:
        params["head.bn.running_mean"] = Tensor(np.zeros(c, dtype=dtype), name="head.bn.running_mean")
        params["head.bn.running_var"] = Tensor(np.ones(c, dtype=dtype), name="head.bn.running_var")
    return params


def patchify(images, pcfg: PatchConfig) -> np.ndarray:
    """``B x d x H x W`` -> ``B x N x (d*P*P)``, tokens in row-major grid order."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    if images.ndim != 4 or images.shape[1:] != (pcfg.channels, pcfg.height, pcfg.width):
        raise ConfigError(
            f"expected images of shape (B, {pcfg.channels}, {pcfg.height}, {pcfg.width}), "
            f"got {images.shape}")
    b, d = images.shape[:2]
    rows, cols = pcfg.grid
    p = pcfg.patch
    x = images.reshape(b, d, rows, p, cols, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, rows * cols, d * p * p)


def normalize_pixels(images) -> np.ndarray:
    """Shift and scale ``B x d x H x W`` images channel-wise; non-RGB inputs use the averages."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    if images.ndim == 4 and images.shape[1] == 3:
        mean, std = PIXEL_MEAN[:, None, None], PIXEL_STD[:, None, None]
    else:
        mean, std = PIXEL_MEAN.mean(), PIXEL_STD.mean()
    return ((images - mean) / std).astype(images.dtype, copy=False)


def patch_embed(images, pcfg: PatchConfig, params: dict) -> TokenBatch:
    patches = patchify(images, pcfg).astype(params["patch_embed.weight"].dtype, copy=False)
    b = patches.shape[0]
    x = matmul(Tensor(patches), params["patch_embed.weight"]) + params["patch_embed.bias"]
    cls = params["cls_token"] * Tensor(np.ones((b, 1, 1), dtype=patches.dtype))
    return TokenBatch(concat([cls, x], axis=1) + params["pos_embed"])


def _linear(x, params, prefix):
    return matmul(x, params[prefix + ".weight"]) + params[prefix + ".bias"]


def encoder_block(tb: TokenBatch, params: dict, index: int, heads: int,
                  need_cls_attn: bool = False):
    """Pre-norm MHSA + MLP block; attention honours ``tb.decision`` if present.

    Returns the new TokenBatch and, when requested, the head-averaged class
    attention of this block.
    """
    pre = f"blocks.{index}."
    x = tb.tokens
    b, t, c = x.shape
    dh = c // heads
    h = layer_norm(x, params[pre + "norm1.weight"], params[pre + "norm1.bias"], LN_EPS)
    qkv = _linear(h, params, pre + "attn.qkv").reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    mask = tb.decision.mask if tb.decision is not None else None
    attn = hts.masked_attention(q, k, v, mask)
    x = x + _linear(attn.transpose(0, 2, 1, 3).reshape(b, t, c), params, pre + "attn.proj")
    h = layer_norm(x, params[pre + "norm2.weight"], params[pre + "norm2.bias"], LN_EPS)
    x = x + _linear(gelu(_linear(h, params, pre + "mlp.fc1")), params, pre + "mlp.fc2")
    attn_cls = hts.class_attention(q, k) if need_cls_attn else None
    return TokenBatch(x, tb.decision), attn_cls


def forward_features(images, cfg: ModelConfig, params: dict, mode: str = "train", rng=None,
                     forced_masks=None, forced_keep=None, gumbel_noise=None,
                     hard: bool = True, reweight: bool | None = None) -> ForwardOutput:
    """Class-token feature (after the final norm) plus the sparsification record.

    ``train``: every token is computed and dropped tokens are masked out of
    attention. ``forced_masks`` replaces the sampled cumulative mask per stage;
    ``gumbel_noise`` freezes the sampling noise. ``infer``: tokens are deleted
    at every stage; ``forced_keep`` pins the surviving original indices.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    sched = cfg.sparsify
    if reweight is None:
        reweight = mode == "train" and sched is not None
    tb = patch_embed(normalize_pixels(images), cfg.patch, params)
    n = cfg.patch.num_patches
    b = tb.tokens.shape[0]
    out = ForwardOutput(feature=None)
    if mode == "train" and sched is not None:
        tb.decision = hts.DecisionState()
    kept = np.broadcast_to(np.arange(n), (b, n))
    for layer in range(cfg.depth):
        stage = sched.stage_at(layer) if sched is not None else None
        if stage is not None:
            pre = f"predictors.{stage}."
            img = tb.tokens[:, 1:]
            if mode == "train":
                logits = hts.predictor_logits(img, tb.decision.mask, params, pre)
                if forced_masks is not None:
                    decision = Tensor(np.asarray(forced_masks[stage], dtype=img.dtype))
                else:
                    noise = None if gumbel_noise is None else gumbel_noise[stage]
                    decision = hts.gumbel_sample_logits(log_softmax_rows(logits), rng=rng,
                                                        noise=noise, hard=hard)
                mask = hts.update_mask(tb.decision.mask, decision)
                tb.decision.record(softmax_rows(logits), mask)
            else:
                ratio = sched.stage_ratios[stage]
                if forced_keep is not None:
                    pos = _positions(kept, forced_keep[stage])
                    idx = np.concatenate([np.zeros((b, 1), dtype=np.intp), pos + 1], axis=1)
                    tb.tokens = take_tokens(tb.tokens, idx)
                    kept = np.take_along_axis(kept, pos, axis=1)
                elif hts.keep_count(ratio, n) < img.shape[1]:
                    pi = softmax_rows(hts.predictor_logits(img, None, params, pre))
                    tb.tokens, kept = hts.prune_for_inference(tb.tokens, pi.data[..., 1], ratio, n, kept)
                out.kept.append(np.asarray(kept))
                out.token_counts.append(tb.tokens.shape[1] - 1)
        last = layer == cfg.depth - 1
        tb, attn_cls = encoder_block(tb, params, layer, cfg.heads, need_cls_attn=last and reweight)
        if attn_cls is not None:
            out.attn_cls = attn_cls
    x = tb.tokens
    if reweight and out.attn_cls is not None:
        x = hts.class_attn_reweight(x, out.attn_cls, params["reweight.lambda"])
    x = layer_norm(x, params["norm.weight"], params["norm.bias"], LN_EPS)
    out.feature = x[:, 0]
    out.decision = tb.decision
    return out


def _positions(kept: np.ndarray, wanted) -> np.ndarray:
    """Positions in the current sequence of the original indices ``wanted``."""
    wanted = np.sort(np.asarray(wanted), axis=-1)
    pos = np.empty(wanted.shape, dtype=np.intp)
    for r in range(kept.shape[0]):
        lookup = {int(v): i for i, v in enumerate(kept[r])}
        pos[r] = [lookup[int(v)] for v in wanted[r]]
    return pos


class VisionTransformer:
    """Weights plus configuration; thin object wrapper over the functional core."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params

    def parameters(self) -> list:
        return [p for p in self.params.values() if p.requires_grad]

    def forward_features(self, images, mode="train", **kw) -> ForwardOutput:
        return forward_features(images, self.cfg, self.params, mode, **kw)

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def with_ratio(self, ratio: float) -> "VisionTransformer":
        return VisionTransformer(self.cfg.with_ratio(ratio), self.params)
