"""Synthetic person re-identification data and the dataset manifest."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import pnm
from .augment import OcclusionPatch, load_patch_library

MANIFEST_HEADER = ["path", "identity", "camera", "split"]
SPLITS = ("train", "query", "gallery")


@dataclass
class ReIDDataset:
    images: np.ndarray  # B x 3 x H x W float32
    identities: np.ndarray
    cameras: np.ndarray
    splits: np.ndarray
    paths: list = field(default_factory=list)
    occluders: list = field(default_factory=list)
    eval_occluders: list = field(default_factory=list)

    def subset(self, split: str):
        keep = self.splits == split
        return self.images[keep], self.identities[keep], self.cameras[keep]

    def train_labels(self):
        """Training identities remapped to contiguous class indices."""
        _, ids, _ = self.subset("train")
        classes = np.unique(ids)
        return np.searchsorted(classes, ids), len(classes)


@dataclass
class SynthSpec:
    identities: int = 32
    images_per_id: int = 8
    height: int = 64
    width: int = 32
    cameras: int = 2
    occluders: int = 24
    noise: float = 0.12
    seed: int = 0


def _identity_look(rng, height, width):
    clutter = []
    for _ in range(3):
        h, w = int(rng.integers(4, height // 3)), int(rng.integers(3, width // 2))
        y, x = int(rng.integers(0, height - h)), int(rng.integers(0, width - w))
        clutter.append((y, x, h, w, rng.uniform(0.1, 0.9, 3)))
    return {
        "background": rng.uniform(0.2, 0.8, 3) * rng.uniform(0.6, 1.0),
        "clutter": clutter,
        "hair": rng.uniform(0.0, 0.5, 3),
        "skin": np.array([0.85, 0.65, 0.5]) * rng.uniform(0.7, 1.1),
        "top": rng.uniform(0.0, 1.0, 3),
        "top2": rng.uniform(0.0, 1.0, 3),
        "pattern": int(rng.integers(0, 3)),  # solid, stripes, checks
        "period": int(rng.integers(3, 7)),
        "bottom": rng.uniform(0.0, 1.0, 3),
        "shoes": rng.uniform(0.0, 0.6, 3),
        "bag": rng.uniform(0.0, 1.0, 3) if rng.random() < 0.5 else None,
        "bag_side": int(rng.integers(0, 2)),
    }


def _camera_transform(rng):
    return rng.uniform(0.75, 1.25, 3), rng.uniform(-0.1, 0.1)


def render_figure(look, height, width) -> np.ndarray:
    """Noise-free ``3 x H x W`` rendering of one identity: background clutter and the figure."""
    img = np.empty((3, height, width))
    img[:] = look["background"][:, None, None]
    for y, x, h, w, color in look["clutter"]:
        img[:, y:y + h, x:x + w] = color[:, None, None]

    def rows(a, b):
        return slice(int(a * height), int(b * height))

    def cols(a, b):
        return slice(int(a * width), int(b * width))

    img[:, rows(0.04, 0.10), cols(0.35, 0.65)] = look["hair"][:, None, None]
    img[:, rows(0.10, 0.20), cols(0.38, 0.62)] = look["skin"][:, None, None]
    r, c = rows(0.20, 0.55), cols(0.22, 0.78)
    torso = np.broadcast_to(look["top"][:, None, None], img[:, r, c].shape).copy()
    yy, xx = np.mgrid[0:torso.shape[1], 0:torso.shape[2]]
    period = look["period"]
    if look["pattern"] == 1:
        torso[:, (yy // period) % 2 == 1] = look["top2"][:, None]
    elif look["pattern"] == 2:
        torso[:, ((yy // period) + (xx // period)) % 2 == 1] = look["top2"][:, None]
    img[:, r, c] = torso
    img[:, rows(0.55, 0.90), cols(0.28, 0.72)] = look["bottom"][:, None, None]
    img[:, rows(0.90, 0.97), cols(0.25, 0.75)] = look["shoes"][:, None, None]
    if look["bag"] is not None:
        side = cols(0.05, 0.22) if look["bag_side"] == 0 else cols(0.78, 0.95)
        img[:, rows(0.35, 0.55), side] = look["bag"][:, None, None]
    return img


def apply_camera(figure: np.ndarray, camera, rng, noise: float) -> np.ndarray:
    """Per-channel gain and global offset of one camera, then Gaussian sensor noise."""
    gain, offset = camera
    img = figure * gain[:, None, None] + offset
    img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_occluder(rng, orientation: str) -> np.ndarray:
    """Textured occluder; vertical ones are more than twice as tall as wide."""
    if orientation == "vertical":
        w = int(rng.integers(6, 14))
        h = int(w * rng.uniform(2.3, 4.0))
    else:
        h = int(rng.integers(8, 16))
        w = int(h * rng.uniform(1.0, 3.0))
    base = rng.uniform(0.0, 1.0, 3)
    img = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
    yy, xx = np.mgrid[0:h, 0:w]
    kind = rng.integers(0, 3)
    if kind == 0:
        img[:, (yy // int(rng.integers(2, 5))) % 2 == 0] = rng.uniform(0.0, 1.0, 3)[:, None]
    elif kind == 1:
        img[:, (xx // int(rng.integers(2, 5))) % 2 == 0] = rng.uniform(0.0, 1.0, 3)[:, None]
    img += rng.normal(0.0, 0.08, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_synthetic(spec: SynthSpec) -> ReIDDataset:
    """In-memory dataset; the first half of the identities train, the rest are test."""
    rng = np.random.default_rng(spec.seed)
    looks = [_identity_look(rng, spec.height, spec.width) for _ in range(spec.identities)]
    cams = [_camera_transform(rng) for _ in range(spec.cameras)]
    n_train = spec.identities // 2
    images, ids, camids, splits, paths = [], [], [], [], []
    for pid, look in enumerate(looks):
        figure = render_figure(look, spec.height, spec.width)
        for j in range(spec.images_per_id):
            cam = j % spec.cameras
            images.append(apply_camera(figure, cams[cam], rng, spec.noise))
            ids.append(pid)
            camids.append(cam)
            if pid < n_train:
                splits.append("train")
            else:
                splits.append("query" if j < spec.cameras else "gallery")
            paths.append(os.path.join("images", f"{pid:04d}_c{cam}_{j:02d}.ppm"))
    occ_rng = np.random.default_rng([spec.seed, 1])
    eval_rng = np.random.default_rng([spec.seed, 2])
    kinds = ["vertical", "horizontal"]
    occluders = [OcclusionPatch(render_occluder(occ_rng, kinds[i % 2]), f"occ_{i:03d}.ppm")
                 for i in range(spec.occluders)]
    eval_occ = [OcclusionPatch(render_occluder(eval_rng, kinds[i % 2]), f"occ_{i:03d}.ppm")
                for i in range(spec.occluders)]
    return ReIDDataset(np.stack(images), np.array(ids), np.array(camids), np.array(splits),
                       paths, occluders, eval_occ)


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)


def read_manifest(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MANIFEST_HEADER:
            raise ValueError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = []
        for row in reader:
            if not row:
                continue
            rel, pid, cam, split = row
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r} for {rel}")
            rows.append((rel, int(pid), int(cam), split))
    train_ids = {r[1] for r in rows if r[3] == "train"}
    test_ids = {r[1] for r in rows if r[3] != "train"}
    if train_ids & test_ids:
        raise ValueError(f"identities appear in both train and test: {sorted(train_ids & test_ids)}")
    return rows


def gen_synth(out_dir, spec: SynthSpec) -> ReIDDataset:
    """Render the dataset to P6 files plus ``manifest.csv`` under ``out_dir``."""
    ds = make_synthetic(spec)
    for rel, img in zip(ds.paths, ds.images):
        pnm.write_ppm(os.path.join(out_dir, rel), pnm.to_hwc_uint8(img))
    for sub, patches in (("occluders", ds.occluders), ("occluders_eval", ds.eval_occluders)):
        for p in patches:
            pnm.write_ppm(os.path.join(out_dir, sub, p.name), pnm.to_hwc_uint8(p.pixels))
    rows = [(p, int(i), int(c), s) for p, i, c, s in zip(ds.paths, ds.identities, ds.cameras, ds.splits)]
    write_manifest(os.path.join(out_dir, "manifest.csv"), rows)
    return ds


def load_dataset(manifest_path) -> ReIDDataset:
    root = os.path.dirname(os.path.abspath(manifest_path))
    rows = read_manifest(manifest_path)
    images = np.stack([pnm.to_chw(pnm.read_ppm(os.path.join(root, r[0]))) for r in rows])
    return ReIDDataset(
        images,
        np.array([r[1] for r in rows]),
        np.array([r[2] for r in rows]),
        np.array([r[3] for r in rows]),
        [r[0] for r in rows],
        load_patch_library(os.path.join(root, "occluders")),
        load_patch_library(os.path.join(root, "occluders_eval")),
    )
