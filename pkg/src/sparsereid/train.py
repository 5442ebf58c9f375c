"""Training: run configuration, P x K sampling, optimisers with cosine decay, the full objective."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import augment, distill, hts, vit
from .numerics import no_grad

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every knob of a run; serialises to and from ``key=value`` text."""

    # data / io
    manifest: str = ""
    out: str = "run"
    teacher_path: str = ""
    height: int = 64
    width: int = 32
    patch: int = 16
    pad: int = 0
    # student
    embed_dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    keep_ratio: float = 0.7
    stage_layers: tuple = (2, 3)
    # teacher
    teacher_embed_dim: int = 64
    teacher_depth: int = 4
    teacher_heads: int = 4
    teacher_epochs: int = 30
    # components
    hts: bool = True
    npkd: bool = True
    noda: bool = True
    align_method: str = "interpolation"
    align_direction: str = "T->S"
    kl_student_first: bool = True
    # objective
    alpha: float = 2.0
    beta: float = 1.0
    lambda_ratio: float = 2.0
    kd_lambda: float = 0.1
    temperature: float = 1.0
    # optimisation
    optimizer: str = "adamw"
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    warmup_epochs: int = 2
    ids_per_batch: int = 4
    imgs_per_id: int = 4
    seed: int = 0

    def loss_weights(self) -> distill.LossWeights:
        return distill.LossWeights(self.alpha, self.beta, self.lambda_ratio, self.kd_lambda,
                                   self.temperature)

    def patch_config(self) -> vit.PatchConfig:
        return vit.PatchConfig(self.height, self.width, 3, self.patch)

    def student_config(self, num_classes: int) -> vit.ModelConfig:
        sched = hts.SparsifySchedule(self.stage_layers, self.keep_ratio) if self.hts else None
        return vit.ModelConfig(self.patch_config(), self.embed_dim, self.depth, self.heads,
                               self.mlp_ratio, num_classes, sched, bn_neck=True)

    def teacher_config(self, num_classes: int) -> vit.ModelConfig:
        return vit.ModelConfig(self.patch_config(), self.teacher_embed_dim, self.teacher_depth,
                               self.teacher_heads, self.mlp_ratio, num_classes, None, bn_neck=True)

    # -- key=value serialisation ------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict, base: "RunConfig | None" = None) -> "RunConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        types = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _parse_value(getattr(cls(), key), str(raw).strip(), key))
        return cfg

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        return cls.from_dict(values, base)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _parse_value(default, raw: str, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


# ---------------------------------------------------------------------------
# sampling and optimisation


def pk_batches(labels: np.ndarray, ids_per_batch: int, imgs_per_id: int, rng) -> list:
    """One epoch of index batches built from ``imgs_per_id``-sized chunks of one identity.

    Every image lands in some chunk (short identities are topped up by
    resampling); chunks are shuffled and grouped ``ids_per_batch`` at a time.
    """
    labels = np.asarray(labels)
    chunks = []
    for pid in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == pid))
        short = -len(idx) % imgs_per_id
        if short:
            idx = np.concatenate([idx, rng.choice(idx, short)])
        chunks.extend(np.split(idx, len(idx) // imgs_per_id))
    chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    groups = [chunks[s:s + ids_per_batch] for s in range(0, len(chunks), ids_per_batch)]
    if len(groups) > 1 and len(groups[-1]) < 2:
        groups[-2].extend(groups.pop())
    return [np.concatenate(g) for g in groups]


def cosine_lr(base: float, step: int, total: int, warmup: int) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(1.0, progress)))


class SGD:
    """Momentum SGD; weight decay is an L2 term added to the gradient of matrices only."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p._grad is None:
                continue
            g = p._grad
            if self.weight_decay and p.ndim > 1:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


class AdamW:
    """Adam with decoupled weight decay on matrices only."""

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p._grad is None:
                continue
            g = p._grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.ndim > 1:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


OPTIMIZERS = ("sgd", "adamw")


def make_optimizer(params, cfg: "RunConfig"):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.momentum, cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return AdamW(params, weight_decay=cfg.weight_decay)
    raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {cfg.optimizer!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: vit.VisionTransformer
    log: list = field(default_factory=list)  # LossParts per step
    epoch_loss: list = field(default_factory=list)
    extra_params: dict = field(default_factory=dict)


def _augment_config(cfg: RunConfig, noda: bool) -> augment.AugmentConfig:
    return augment.AugmentConfig(noda_enabled=noda, pad=cfg.pad, seed=cfg.seed)


def fit_teacher(images, labels, cfg: RunConfig, occluders=None, log_fn=None,
                epoch_fn=None) -> TrainResult:
    """Wide, unsparsified model with a BN neck, trained with identity losses only."""
    num_classes = int(np.max(labels)) + 1
    model = vit.VisionTransformer(cfg.teacher_config(num_classes), seed=cfg.seed + 1000)
    tcfg = dataclasses.replace(cfg, hts=False, npkd=False, epochs=cfg.teacher_epochs,
                               noda=cfg.noda and bool(occluders))
    return _fit(model, images, labels, tcfg, teacher=None, occluders=occluders, log_fn=log_fn,
                epoch_fn=epoch_fn)


def fit_student(images, labels, cfg: RunConfig, teacher: vit.VisionTransformer | None = None,
                occluders=None, log_fn=None, epoch_fn=None) -> TrainResult:
    """``log_fn(step, parts)`` sees every step, ``epoch_fn(epoch, result)`` every epoch end."""
    num_classes = int(np.max(labels)) + 1
    if cfg.npkd and teacher is None:
        raise ConfigError("distillation is enabled but no teacher model was supplied")
    if cfg.noda and not occluders:
        raise ConfigError("occluder pasting is enabled but the occluder library is empty")
    model = vit.VisionTransformer(cfg.student_config(num_classes), seed=cfg.seed)
    return _fit(model, images, labels, cfg, teacher=teacher, occluders=occluders, log_fn=log_fn,
                epoch_fn=epoch_fn)


def _fit(model, images, labels, cfg: RunConfig, teacher, occluders, log_fn,
         epoch_fn=None) -> TrainResult:
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    weights = cfg.loss_weights()
    aug_cfg = _augment_config(cfg, cfg.noda)
    result = TrainResult(model)
    extra = {}
    if cfg.npkd and cfg.align_method == "linear":
        cs, ct = model.cfg.embed_dim, teacher.cfg.embed_dim
        c_from, c_to = (ct, cs) if cfg.align_direction == "T->S" else (cs, ct)
        extra = distill.init_linear_align(c_from, c_to, seed=cfg.seed + 7)
    result.extra_params = extra
    opt = make_optimizer(model.parameters() + list(extra.values()), cfg)
    steps_per_epoch = len(pk_batches(labels, cfg.ids_per_batch, cfg.imgs_per_id,
                                     np.random.default_rng(0)))
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        batches = pk_batches(labels, cfg.ids_per_batch, cfg.imgs_per_id, rng)
        epoch_total = []
        for idx in batches:
            dual = augment.build_dual_batch(images[idx], labels[idx], aug_cfg, occluders,
                                            epoch=epoch, sample_ids=idx)
            x, y = dual.stacked()
            parts, loss = training_loss(model, x, y, cfg, weights, teacher, extra,
                                        rng=np.random.default_rng([cfg.seed, step, 2]))
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(cfg.lr, step, total, warmup))
            result.log.append(parts)
            epoch_total.append(parts.total)
            if log_fn is not None:
                log_fn(step, parts)
            step += 1
        result.epoch_loss.append(float(np.mean(epoch_total)))
        logger.info("epoch %d loss %.4f", epoch, result.epoch_loss[-1])
        if epoch_fn is not None:
            epoch_fn(epoch, result)
    return result


def training_loss(model, x, y, cfg: RunConfig, weights, teacher=None, extra=None, rng=None,
                  gumbel_noise=None, hard: bool = True):
    """Full objective on one batch; returns (LossParts, scalar Tensor)."""
    out = model.forward_features(x, "train", rng=rng, gumbel_noise=gumbel_noise, hard=hard)
    f = out.feature
    logits, _ = distill.classifier_logits(f, model.params, bn_neck=model.cfg.bn_neck)
    l_cls = distill.cls_loss(logits, y)
    l_tri = distill.triplet_loss(f, y)
    zero = 0.0
    l_ratio = zero
    if model.cfg.sparsify is not None:
        l_ratio = hts.ratio_loss(out.decision.masks, model.cfg.sparsify)
    l_kd, l_kl, l_feat = zero, zero, zero
    if cfg.npkd and teacher is not None:
        f_t, g_t = teacher_outputs(teacher, x)
        l_kd, l_kl, l_feat = distill.npkd_loss(
            f, f_t, logits, g_t, weights, cfg.align_method, cfg.align_direction,
            extra, cfg.kl_student_first)
    loss = distill.total_loss(l_kd, l_ratio, l_cls, l_tri, weights)
    parts = distill.LossParts(
        cls=_val(l_cls), tri=_val(l_tri), kl=_val(l_kl), feat=_val(l_feat),
        ratio=_val(l_ratio), total=_val(loss))
    return parts, loss


def teacher_outputs(teacher, x):
    """Frozen teacher embedding and the logits its classifier gives that embedding.

    A teacher with a BN neck contributes its post-BN (inference statistics)
    embedding; the classifier is then applied to it directly, with no second
    normalisation on the distillation path.
    """
    with no_grad():
        f_t = teacher.forward_features(x, "infer").feature
        if teacher.cfg.bn_neck:
            f_t = distill.batch_norm(f_t, teacher.params, training=False)
        g_t, _ = distill.classifier_logits(f_t, teacher.params, bn_neck=False)
    return f_t, g_t


def _val(x) -> float:
    return float(x.item()) if hasattr(x, "item") else float(x)
