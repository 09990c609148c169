"""Estimator API: sklearn protocol compliance and behaviour."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from minimoco import phantoms
from minimoco.estimators import ContrastivePretrainer, LinearSegmenter, ZCAWhitening
from minimoco.validation import check_feature_matrix, check_images, check_masks


@pytest.fixture(scope="module")
def phantom_stack():
    cfg = phantoms.PhantomConfig(num_samples=24, image_size=32)
    images = np.stack([phantoms.generate_phantom(cfg, i).image for i in range(24)])
    masks = np.stack([phantoms.generate_phantom(cfg, i).mask for i in range(24)])
    return images, masks


class TestValidation:
    def test_feature_matrix(self):
        with pytest.raises(ValueError, match="2-D"):
            check_feature_matrix(np.zeros(3))
        with pytest.raises(ValueError, match="NaN"):
            check_feature_matrix(np.array([[np.nan, 1.0]]))

    def test_images(self):
        x = check_images(np.zeros((1, 8, 8)))
        assert x.shape == (1, 1, 8, 8)
        with pytest.raises(ValueError, match="range|\\[0, 1\\]"):
            check_images(np.full((1, 1, 4, 4), 2.0))

    def test_masks(self):
        imgs = np.zeros((2, 1, 4, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="align"):
            check_masks(np.zeros((2, 5, 5), dtype=np.uint8), imgs)
        with pytest.raises(ValueError, match="integer"):
            check_masks(np.zeros((2, 4, 4)), imgs)


class TestZCAWhiteningEstimator:
    def test_exact_whitens(self, rng):
        x = rng.normal(size=(400, 5)) @ np.diag([4, 2, 1, 0.5, 0.25]) + 2.0
        est = ZCAWhitening(method="exact", eps=1e-9)
        out = est.fit_transform(x)
        np.testing.assert_allclose(np.cov(out.T, bias=True), np.eye(5), atol=1e-5)

    def test_newton_matches_exact_when_well_conditioned(self, rng):
        x = rng.normal(size=(300, 4)) @ np.diag([1.2, 1.0, 0.9, 0.8])
        exact = ZCAWhitening(method="exact").fit_transform(x)
        newton = ZCAWhitening(method="newton", newton_steps=9).fit_transform(x)
        assert np.abs(exact - newton).max() < 1e-6

    def test_sklearn_protocol(self):
        est = ZCAWhitening(method="newton", newton_steps=7)
        params = est.get_params()
        assert params == {"method": "newton", "eps": 1e-5, "newton_steps": 7}
        cloned = clone(est)
        assert cloned.get_params() == params
        est.set_params(eps=1e-7)
        assert est.eps == 1e-7

    def test_not_fitted(self, rng):
        with pytest.raises(NotFittedError):
            ZCAWhitening().transform(rng.normal(size=(4, 3)))

    def test_unknown_method(self, rng):
        with pytest.raises(ValueError, match="method"):
            ZCAWhitening(method="pca").fit(rng.normal(size=(10, 3)))


class TestContrastivePretrainer:
    def test_fit_transform_and_save(self, phantom_stack, tmp_path):
        images, _ = phantom_stack
        est = ContrastivePretrainer(epochs=1, batch_size=8, queue_size=16,
                                    num_patches=4, seed=1)
        est.fit(images)
        feats = est.transform(images[:5])
        assert feats.shape == (5, 128)
        emb = est.transform(images[:5], source="embedding")
        assert emb.shape == (5, 64)
        np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-4)
        report = est.spectrum_report(images)
        assert report.feature_dim == 128
        est.save(tmp_path / "m.mmc1")
        assert (tmp_path / "m.mmc1").exists()

    def test_clone_and_params(self):
        est = ContrastivePretrainer(epochs=3, tau=0.1)
        cloned = clone(est)
        assert cloned.get_params()["tau"] == 0.1
        assert cloned.get_params()["epochs"] == 3

    def test_not_fitted(self, phantom_stack):
        images, _ = phantom_stack
        with pytest.raises(NotFittedError):
            ContrastivePretrainer().transform(images)


class TestLinearSegmenter:
    def test_fit_predict_score(self, phantom_stack):
        images, masks = phantom_stack
        seg = LinearSegmenter(iterations=60, num_classes=5)
        seg.fit(images[:16], masks[:16])
        preds = seg.predict(images[16:])
        assert preds.shape == masks[16:].shape
        assert preds.dtype == np.uint8
        score = seg.score(images[16:], masks[16:])
        assert 0.0 <= score <= 1.0

    def test_not_fitted(self, phantom_stack):
        images, _ = phantom_stack
        with pytest.raises(NotFittedError):
            LinearSegmenter().predict(images)

    def test_params_roundtrip(self):
        seg = LinearSegmenter(mode="finetune", iterations=7)
        assert clone(seg).get_params()["mode"] == "finetune"
