import numpy as np
import pytest

from sparsereid import hts, vit
from sparsereid.numerics import precision


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(sparsify=True, height=32, width=16, patch=8, embed_dim=8, depth=2, heads=2,
                num_classes=3, ratio=0.7, stage_layers=(0, 1)):
    sched = hts.SparsifySchedule(stage_layers, ratio) if sparsify else None
    return vit.ModelConfig(vit.PatchConfig(height, width, 3, patch), embed_dim, depth, heads, 2.0,
                           num_classes, sched, bn_neck=True)


def randomize(model, rng, scale=0.3):
    """Replace the tiny init with larger random weights so every path is exercised."""
    for name, p in model.params.items():
        if not p.requires_grad or name.endswith("norm1.weight") or name.endswith("norm2.weight"):
            continue
        p.data[...] = rng.normal(0.0, scale, p.shape).astype(p.dtype)
    return model


def nested_keeps(rng, batch, n, counts):
    """Random nested kept-index sets per stage plus the matching cumulative masks."""
    keeps, masks = [], []
    current = np.tile(np.arange(n), (batch, 1))
    for c in counts:
        current = np.stack([np.sort(rng.choice(row, size=c, replace=False)) for row in current])
        mask = np.zeros((batch, n))
        np.put_along_axis(mask, current, 1.0, axis=1)
        keeps.append(current)
        masks.append(mask)
    return keeps, masks


def masked_vs_pruned(model, images, rng):
    """Largest class-feature gap between train-mode masking and infer-mode pruning."""
    n = model.cfg.patch.num_patches
    counts = model.cfg.sparsify.keep_counts(n)
    keeps, masks = nested_keeps(rng, len(images), n, counts)
    train = model.forward_features(images, "train", forced_masks=masks, reweight=False).feature
    infer = model.forward_features(images, "infer", forced_keep=keeps).feature
    return float(np.abs(train.data - infer.data).max())


ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Register the outcome of one acceptance criterion for the end-of-run table."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {criterion:>2}: {detail}")
