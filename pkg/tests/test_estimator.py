import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sparsereid import data
from sparsereid.estimator import SparseReID, check_images, check_labels


def small_estimator(**kw):
    params = dict(embed_dim=16, depth=3, heads=2, patch=8, stage_layers=(1, 2), teacher_embed_dim=24,
                  teacher_epochs=2, epochs=2, ids_per_batch=3, imgs_per_id=2)
    params.update(kw)
    return SparseReID(**params)


@pytest.fixture(scope="module")
def small_data():
    return data.make_synthetic(data.SynthSpec(identities=8, images_per_id=4, height=32, width=16,
                                              occluders=4))


class TestValidation:
    def test_shape(self):
        with pytest.raises(ValueError, match="shaped"):
            check_images(np.zeros((2, 32, 16)))

    def test_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            check_images(np.full((1, 3, 16, 16), 2.0))

    def test_nan(self):
        x = np.zeros((1, 3, 16, 16))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            check_images(x)

    def test_patch_multiple(self):
        with pytest.raises(ValueError, match="multiple"):
            check_images(np.zeros((1, 3, 20, 16)), patch=8)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            check_images(np.zeros((0, 3, 16, 16)))

    def test_casts(self):
        assert check_images(np.zeros((1, 3, 16, 16))).dtype == np.float32

    def test_labels(self):
        classes, codes = check_labels(["b", "a", "b"], 3)
        assert list(classes) == ["a", "b"] and list(codes) == [1, 0, 1]
        with pytest.raises(ValueError):
            check_labels([1, 2], 3)
        with pytest.raises(ValueError, match="two identities"):
            check_labels([1, 1, 1], 3)


class TestEstimator:
    def test_params_roundtrip(self):
        est = small_estimator(keep_ratio=0.5)
        assert est.get_params()["keep_ratio"] == 0.5
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()
        est.set_params(epochs=5)
        assert est.epochs == 5

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            small_estimator().transform(np.zeros((1, 3, 32, 16)))

    def test_fit_transform_predict(self, small_data):
        x, ids, _ = small_data.subset("train")
        labels = np.array([f"id{i}" for i in ids])
        est = small_estimator(noda=True)
        emb = est.fit(x, labels, occluders=small_data.occluders).transform(x)
        assert emb.shape == (len(x), 16)
        np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-6)
        pred = est.predict(x)
        assert set(pred) <= set(labels)
        assert 0.0 <= est.score(x, labels) <= 1.0
        assert len(est.loss_curve_) == 2
        assert est.teacher_ is not None

    def test_noda_needs_occluders(self, small_data):
        x, ids, _ = small_data.subset("train")
        with pytest.raises(ValueError, match="occluder"):
            small_estimator(noda=True).fit(x, ids)

    def test_wrong_size_after_fit(self, small_data):
        x, ids, _ = small_data.subset("train")
        est = small_estimator(npkd=False, epochs=1).fit(x, ids)
        with pytest.raises(ValueError, match="expects"):
            est.transform(np.zeros((1, 3, 64, 32)))

    def test_fit_transform(self, small_data):
        x, ids, _ = small_data.subset("train")
        emb = small_estimator(npkd=False, epochs=1).fit_transform(x, ids)
        assert emb.shape[0] == len(x)
