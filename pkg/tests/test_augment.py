import math
import os

import numpy as np
import pytest

from sparsereid import augment, pnm
from sparsereid.augment import OcclusionPatch


def patch(h, w, value=0.5):
    return OcclusionPatch(np.full((3, h, w), value, dtype=np.float32))


def slab_mask(shape, box):
    top, left, h, w = box
    m = np.zeros(shape[1:], dtype=bool)
    m[top:top + h, left:left + w] = True
    return m


class TestOrientation:
    def test_tall_is_vertical(self):
        p = patch(100, 40)
        assert p.aspect_ratio == pytest.approx(2.5)
        assert p.orientation == "vertical"

    def test_wide_is_horizontal(self):
        p = patch(40, 100)
        assert p.aspect_ratio == pytest.approx(0.4)
        assert p.orientation == "horizontal"

    def test_exactly_two_is_horizontal(self):
        assert patch(80, 40).orientation == "horizontal"

    def test_just_above_two(self):
        assert augment.orientation_of(201, 100) == "vertical"


class TestNoda:
    def test_horizontal_range_256x128(self):
        rng = np.random.default_rng(0)
        heights = {augment.noda_box(256, 128, "horizontal", rng)[2] for _ in range(5000)}
        assert min(heights) >= 86 and max(heights) <= 128
        assert min(heights) == math.ceil(256 / 3)
        assert max(heights) == 128

    def test_vertical_range(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            top, left, h, w = augment.noda_box(256, 128, "vertical", rng)
            assert h == 256 and top == 0
            assert 43 <= w <= 64
            assert left in (0, 128 - w)

    def test_flush_edges(self):
        rng = np.random.default_rng(1)
        edges = set()
        for _ in range(200):
            top, left, h, w = augment.noda_box(64, 32, "horizontal", rng)
            edges.add("top" if top == 0 else "bottom" if top + h == 64 else "none")
            top, left, h, w = augment.noda_box(64, 32, "vertical", rng)
            edges.add("left" if left == 0 else "right" if left + w == 32 else "none")
        assert edges == {"top", "bottom", "left", "right"}

    def test_outside_slab_untouched(self, rng):
        img = rng.random((3, 64, 32)).astype(np.float32)
        for p in (patch(10, 30), patch(40, 8)):
            out, box = augment.apply_noda(img, p, rng, return_box=True)
            assert out.shape == img.shape
            outside = ~slab_mask(img.shape, box)
            np.testing.assert_array_equal(out[:, outside], img[:, outside])

    def test_input_not_modified(self, rng):
        img = rng.random((3, 64, 32)).astype(np.float32)
        before = img.copy()
        augment.apply_noda(img, patch(10, 30), rng)
        np.testing.assert_array_equal(img, before)

    def test_slab_holds_patch_pixels(self, rng):
        img = np.zeros((3, 64, 32), dtype=np.float32)
        cfg = augment.AugmentConfig(jitter=0.0)
        out, box = augment.apply_noda(img, patch(10, 30, 0.75), rng, cfg, return_box=True)
        np.testing.assert_allclose(out[:, slab_mask(img.shape, box)], 0.75, atol=1e-6)


class TestRandomErase:
    def test_probability_zero(self, rng):
        img = rng.random((3, 16, 8))
        out = augment.random_erase(img, rng, augment.EraseParams(probability=0.0))
        np.testing.assert_array_equal(out, img)

    def test_within_bounds_and_zero(self):
        rng = np.random.default_rng(7)
        img = np.ones((3, 64, 32))
        params = augment.EraseParams(probability=1.0)
        for _ in range(2000):
            out, box = augment.random_erase(img, rng, params, return_box=True)
            assert box is not None
            top, left, h, w = box
            assert 0 <= top and top + h <= 64 and 0 <= left and left + w <= 32
            region = slab_mask(img.shape, box)
            np.testing.assert_array_equal(out[:, region], 0.0)
            np.testing.assert_array_equal(out[:, ~region], 1.0)

    def test_random_fill(self, rng):
        params = augment.EraseParams(probability=1.0, fill="random")
        out, box = augment.random_erase(np.full((3, 32, 16), 2.0), rng, params, return_box=True)
        region = slab_mask(out.shape, box)
        assert np.all(out[:, region] < 1.0)


class TestDualBatch:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.images = rng.random((6, 3, 32, 16)).astype(np.float32)
        self.labels = np.array([0, 0, 1, 1, 2, 2])
        self.patches = [patch(10, 30), patch(40, 8)]

    def test_labels_shared(self):
        d = augment.build_dual_batch(self.images, self.labels, augment.AugmentConfig(), self.patches)
        np.testing.assert_array_equal(d.labels_a, d.labels_b)
        np.testing.assert_array_equal(d.labels_a, self.labels)
        assert d.a.shape == d.b.shape == self.images.shape

    def test_reproducible(self):
        cfg = augment.AugmentConfig(seed=11)
        a = augment.build_dual_batch(self.images, self.labels, cfg, self.patches, epoch=2)
        b = augment.build_dual_batch(self.images, self.labels, cfg, self.patches, epoch=2)
        np.testing.assert_array_equal(a.a, b.a)
        np.testing.assert_array_equal(a.b, b.b)

    def test_order_independent(self):
        cfg = augment.AugmentConfig(seed=11)
        ids = np.arange(6)
        whole = augment.build_dual_batch(self.images, self.labels, cfg, self.patches, sample_ids=ids)
        perm = np.array([5, 3, 1, 0, 2, 4])
        shuffled = augment.build_dual_batch(self.images[perm], self.labels[perm], cfg, self.patches,
                                            sample_ids=perm)
        # the B view depends only on (seed, epoch, sample id)
        np.testing.assert_array_equal(shuffled.b, whole.b[perm])

    def test_noda_disabled_skips_patches(self):
        cfg = augment.AugmentConfig(noda_enabled=False, random_patch_probability=0.0,
                                    erase=augment.EraseParams(probability=0.0))
        d = augment.build_dual_batch(self.images, self.labels, cfg, None)
        np.testing.assert_array_equal(d.a, self.images)
        np.testing.assert_array_equal(d.b, self.images)

    def test_empty_library(self):
        with pytest.raises(augment.AugmentConfigError):
            augment.build_dual_batch(self.images, self.labels, augment.AugmentConfig(), [])

    def test_stacked(self):
        d = augment.build_dual_batch(self.images, self.labels, augment.AugmentConfig(), self.patches)
        x, y = d.stacked()
        assert x.shape[0] == 12
        np.testing.assert_array_equal(y, np.concatenate([self.labels, self.labels]))


class TestCommon:
    def test_pad_crop_keeps_size(self, rng):
        cfg = augment.AugmentConfig(pad=4, flip_probability=1.0)
        img = rng.random((3, 32, 16))
        out = augment.common_augment(img, rng, cfg)
        assert out.shape == img.shape

    def test_defaults_identity(self, rng):
        img = rng.random((3, 32, 16))
        np.testing.assert_array_equal(augment.common_augment(img, rng, augment.AugmentConfig()), img)

    def test_random_patch_copies_donor(self, rng):
        img, donor = np.zeros((3, 16, 8)), np.ones((3, 16, 8))
        out = augment.random_patch(img, donor, rng)
        assert set(np.unique(out)) == {0.0, 1.0}

    def test_color_jitter_range(self, rng):
        out = augment.color_jitter(rng.random((3, 8, 8)), rng, 0.2)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestLibrary:
    def test_loads_and_skips(self, tmp_path, caplog):
        pnm.write_ppm(str(tmp_path / "a.ppm"), np.zeros((30, 10, 3), dtype=np.uint8))
        (tmp_path / "b.ppm").write_bytes(b"P6\n3 3\n255\nxx")
        (tmp_path / "c.txt").write_text("not an image")
        patches = augment.load_patch_library(str(tmp_path))
        assert [p.name for p in patches] == ["a.ppm"]
        assert patches[0].orientation == "vertical"
        assert "skipping" in caplog.text

    def test_required_but_empty(self, tmp_path):
        with pytest.raises(augment.AugmentConfigError):
            augment.load_patch_library(str(tmp_path), require=True)

    def test_missing_dir(self, tmp_path):
        assert augment.load_patch_library(os.path.join(tmp_path, "nope")) == []
