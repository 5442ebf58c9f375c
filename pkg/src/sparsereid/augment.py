"""Occlusion augmentation: real-world occluder pasting plus the standard baselines."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np
from skimage.transform import resize

from . import pnm

logger = logging.getLogger(__name__)

VERTICAL_ASPECT = 2.0


class AugmentConfigError(ValueError):
    pass


def orientation_of(height: int, width: int) -> str:
    """``vertical`` when height / width is strictly greater than 2."""
    return "vertical" if height / width > VERTICAL_ASPECT else "horizontal"


@dataclass
class OcclusionPatch:
    pixels: np.ndarray  # d x h x w, float in [0, 1]
    name: str = ""

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def aspect_ratio(self) -> float:
        return self.height / self.width

    @property
    def orientation(self) -> str:
        return orientation_of(self.height, self.width)


@dataclass
class EraseParams:
    probability: float = 0.5
    area: tuple = (0.02, 0.4)
    min_aspect: float = 0.3
    fill: str = "zero"  # or "random"


@dataclass
class AugmentConfig:
    noda_enabled: bool = True
    noda_probability: float = 1.0
    pad: int = 0
    flip_probability: float = 0.0
    erase: EraseParams = None
    random_patch_probability: float = 0.5
    random_patch_area: tuple = (0.02, 0.2)
    jitter: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.erase is None:
            self.erase = EraseParams()


def sample_rng(seed: int, epoch: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample) so worker order never matters."""
    return np.random.default_rng([int(seed), int(epoch), int(index), int(stream)])


def load_patch_library(dir_path, require: bool = False) -> list:
    patches = []
    if os.path.isdir(dir_path):
        names = sorted(os.listdir(dir_path))
    else:
        names = []
    for name in names:
        path = os.path.join(dir_path, name)
        if not os.path.isfile(path):
            continue
        try:
            img = pnm.read_ppm(path)
        except (pnm.PNMError, OSError) as exc:
            logger.warning("skipping occluder %s: %s", path, exc)
            continue
        patches.append(OcclusionPatch(pnm.to_chw(img), name))
    if require and not patches:
        raise AugmentConfigError(f"no usable occluder patches in {dir_path!r}")
    return patches


def _resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    if img.shape[1:] == (h, w):
        return img
    out = resize(img.transpose(1, 2, 0), (h, w), order=1, anti_aliasing=False,
                 preserve_range=True, mode="edge")
    return out.transpose(2, 0, 1).astype(img.dtype, copy=False)


def color_jitter(img: np.ndarray, rng, strength: float) -> np.ndarray:
    if strength <= 0:
        return img
    b, c, s = rng.uniform(1 - strength, 1 + strength, size=3)
    out = img * b
    mean = out.mean()
    out = (out - mean) * c + mean
    gray = out.mean(axis=0, keepdims=True)
    out = (out - gray) * s + gray
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def _augment_patch(pixels: np.ndarray, rng, jitter: float) -> np.ndarray:
    out = color_jitter(pixels, rng, jitter)
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    _, h, w = out.shape
    ch = max(1, int(round(h * rng.uniform(0.8, 1.0))))
    cw = max(1, int(round(w * rng.uniform(0.8, 1.0))))
    y = rng.integers(0, h - ch + 1)
    x = rng.integers(0, w - cw + 1)
    return out[:, y:y + ch, x:x + cw]


def noda_box(height: int, width: int, orientation: str, rng) -> tuple:
    """Paste rectangle ``(top, left, h, w)`` flush against one image edge.

    Horizontal occluders span the full width with height in [H/3, H/2] and sit
    on the top or bottom edge; vertical ones span the full height with width
    in [W/3, W/2] on the left or right edge.
    """
    if orientation == "horizontal":
        h = int(rng.integers(math.ceil(height / 3), height // 2 + 1))
        top = 0 if rng.random() < 0.5 else height - h
        return top, 0, h, width
    w = int(rng.integers(math.ceil(width / 3), width // 2 + 1))
    left = 0 if rng.random() < 0.5 else width - w
    return 0, left, height, w


def apply_noda(image: np.ndarray, patch: OcclusionPatch, rng, cfg: AugmentConfig | None = None,
               return_box: bool = False):
    """Paste an augmented, resized occluder onto a copy of ``image`` (d x H x W)."""
    jitter = 0.2 if cfg is None else cfg.jitter
    _, height, width = image.shape
    box = noda_box(height, width, patch.orientation, rng)
    top, left, h, w = box
    pixels = _augment_patch(patch.pixels.astype(image.dtype, copy=False), rng, jitter)
    out = image.copy()
    out[:, top:top + h, left:left + w] = _resize(pixels, h, w)
    return (out, box) if return_box else out


def random_erase(image: np.ndarray, rng, params: EraseParams | None = None, return_box=False):
    """Erase one random rectangle (inside the image) to zero or noise."""
    params = EraseParams() if params is None else params
    out = image.copy()
    box = None
    if rng.random() < params.probability:
        _, height, width = image.shape
        area = height * width
        for _ in range(100):
            target = rng.uniform(*params.area) * area
            aspect = math.exp(rng.uniform(math.log(params.min_aspect), -math.log(params.min_aspect)))
            h = int(round(math.sqrt(target * aspect)))
            w = int(round(math.sqrt(target / aspect)))
            if 0 < h < height and 0 < w < width:
                top = int(rng.integers(0, height - h + 1))
                left = int(rng.integers(0, width - w + 1))
                if params.fill == "random":
                    out[:, top:top + h, left:left + w] = rng.random((image.shape[0], h, w))
                else:
                    out[:, top:top + h, left:left + w] = 0.0
                box = (top, left, h, w)
                break
    return (out, box) if return_box else out


def random_patch(image: np.ndarray, donor: np.ndarray, rng, area=(0.02, 0.2)) -> np.ndarray:
    """Copy a random rectangle of ``donor`` to a random place in ``image``."""
    _, height, width = image.shape
    target = rng.uniform(*area) * height * width
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    h = min(height, max(1, int(round(math.sqrt(target * aspect)))))
    w = min(width, max(1, int(round(math.sqrt(target / aspect)))))
    sy, sx = rng.integers(0, height - h + 1), rng.integers(0, width - w + 1)
    dy, dx = rng.integers(0, height - h + 1), rng.integers(0, width - w + 1)
    out = image.copy()
    out[:, dy:dy + h, dx:dx + w] = donor[:, sy:sy + h, sx:sx + w]
    return out


def common_augment(image: np.ndarray, rng, cfg: AugmentConfig, size=None) -> np.ndarray:
    """Resize, zero-pad, random crop back to size, random horizontal flip."""
    _, height, width = image.shape if size is None else (None, *size)
    out = _resize(image, height, width)
    if cfg.pad > 0:
        p = cfg.pad
        padded = np.pad(out, ((0, 0), (p, p), (p, p)))
        y, x = rng.integers(0, 2 * p + 1, size=2)
        out = padded[:, y:y + height, x:x + width]
    if rng.random() < cfg.flip_probability:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


@dataclass
class DualBatch:
    a: np.ndarray
    b: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray

    def stacked(self):
        return np.concatenate([self.a, self.b]), np.concatenate([self.labels_a, self.labels_b])


def _generalized_view(images, i, rng, cfg):
    x = common_augment(images[i], rng, cfg)
    x = random_erase(x, rng, cfg.erase)
    if len(images) > 1 and rng.random() < cfg.random_patch_probability:
        j = int(rng.integers(0, len(images) - 1))
        j += j >= i
        x = random_patch(x, images[j], rng, cfg.random_patch_area)
    return x


def build_dual_batch(images: np.ndarray, labels, cfg: AugmentConfig, patches=None,
                     epoch: int = 0, sample_ids=None) -> DualBatch:
    """Two views of the same batch.

    View A: common augmentation, random erasing, random patch. View B: common
    augmentation then occluder pasting (or another A-style view when occluder
    pasting is disabled). Labels are shared.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if sample_ids is None:
        sample_ids = np.arange(len(images))
    if cfg.noda_enabled and not patches:
        raise AugmentConfigError("occluder pasting enabled but the patch library is empty")
    view_a, view_b = [], []
    for i, sid in enumerate(sample_ids):
        rng_a = sample_rng(cfg.seed, epoch, sid, 0)
        rng_b = sample_rng(cfg.seed, epoch, sid, 1)
        view_a.append(_generalized_view(images, i, rng_a, cfg))
        if cfg.noda_enabled:
            x = common_augment(images[i], rng_b, cfg)
            if rng_b.random() < cfg.noda_probability:
                patch = patches[int(rng_b.integers(0, len(patches)))]
                x = apply_noda(x, patch, rng_b, cfg)
            view_b.append(x)
        else:
            view_b.append(_generalized_view(images, i, rng_b, cfg))
    return DualBatch(np.stack(view_a), np.stack(view_b), labels.copy(), labels.copy())
