"""Phantom generator determinism, similarity dial, and storage round trips."""

import json

import numpy as np
import pytest

from minimoco import phantoms as ph
from minimoco.phantoms import DatasetError, PhantomConfig


def _images(cfg, n):
    return np.stack([ph.generate_phantom(cfg, i).image[0].ravel() for i in range(n)])


def mean_pairwise_correlation(images):
    c = np.corrcoef(images)
    iu = np.triu_indices(images.shape[0], 1)
    return float(c[iu].mean())


class TestGeneration:
    def test_deterministic_per_index(self):
        cfg = PhantomConfig(num_samples=10)
        a = ph.generate_phantom(cfg, 3)
        b = ph.generate_phantom(cfg, 3)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
        assert a.sample_id == 3

    def test_identity_when_undeformed(self):
        cfg = PhantomConfig(num_samples=5, deform_amplitude=0.0, texture_noise=0.0)
        samples = [ph.generate_phantom(cfg, i) for i in range(5)]
        for s in samples[1:]:
            assert np.array_equal(s.image, samples[0].image)
            assert np.array_equal(s.mask, samples[0].mask)

    def test_mask_intensity_bands_align(self):
        cfg = PhantomConfig(num_samples=2, deform_amplitude=0.0, texture_noise=0.0)
        sample = ph.generate_phantom(cfg, 0)
        img, mask = sample.image[0], sample.mask
        for c in range(1, cfg.num_classes):
            lo, hi = ph.class_intensity_band(c)
            values = img[mask == c]
            assert values.size > 0
            assert values.min() >= lo - 1e-9 and values.max() <= hi + 1e-9

    def test_value_range_and_types(self):
        cfg = PhantomConfig(num_samples=3)
        s = ph.generate_phantom(cfg, 1)
        assert s.image.dtype == np.float32 and s.image.shape == (1, 64, 64)
        assert s.mask.dtype == np.uint8 and s.mask.shape == (64, 64)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_every_class_present(self):
        cfg = PhantomConfig(num_samples=60)
        counts = np.zeros(cfg.num_classes)
        for i in range(60):
            mask = ph.generate_phantom(cfg, i).mask
            for c in range(cfg.num_classes):
                counts[c] += bool((mask == c).any())
        assert np.all(counts >= 0.99 * 60)

    def test_high_inter_image_similarity_at_defaults(self):
        cfg = PhantomConfig(num_samples=100)
        assert mean_pairwise_correlation(_images(cfg, 100)) > 0.8

    def test_similarity_decreases_with_amplitude(self):
        corrs = []
        for amp in (0.05, 0.15, 0.3):
            cfg = PhantomConfig(num_samples=50, deform_amplitude=amp)
            corrs.append(mean_pairwise_correlation(_images(cfg, 50)))
        assert corrs[0] > corrs[1] > corrs[2]

    def test_index_out_of_range(self):
        with pytest.raises(DatasetError, match="out of range"):
            ph.generate_phantom(PhantomConfig(num_samples=4), 4)

    def test_config_validation(self):
        with pytest.raises(DatasetError):
            PhantomConfig(num_classes=1)
        with pytest.raises(DatasetError):
            PhantomConfig(deform_amplitude=0.5)


class TestStorage:
    def test_write_load_roundtrip(self, tmp_path):
        cfg = PhantomConfig(num_samples=6, image_size=32)
        manifest = ph.write_dataset(cfg, tmp_path)
        assert manifest["count"] == 6
        images, masks = ph.load_batch(tmp_path, [3, 1, 3])
        ref = ph.generate_phantom(cfg, 3)
        assert np.array_equal(images[0], ref.image)
        assert np.array_equal(images[2], ref.image)
        assert np.array_equal(masks[0], ref.mask)
        assert np.array_equal(images[1], ph.generate_phantom(cfg, 1).image)

    def test_index_out_of_range(self, tmp_path):
        ph.write_dataset(PhantomConfig(num_samples=3, image_size=16), tmp_path)
        with pytest.raises(DatasetError, match="out of range"):
            ph.load_batch(tmp_path, [3])

    def test_corrupted_manifest(self, tmp_path):
        ph.write_dataset(PhantomConfig(num_samples=2, image_size=16), tmp_path)
        (tmp_path / "manifest.json").write_text("{not json", encoding="utf-8")
        with pytest.raises(DatasetError, match="corrupted"):
            ph.load_batch(tmp_path, [0])

    def test_version_mismatch(self, tmp_path):
        ph.write_dataset(PhantomConfig(num_samples=2, image_size=16), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["format_version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DatasetError, match="format"):
            ph.load_batch(tmp_path, [0])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            ph.read_manifest(tmp_path)


class TestSplits:
    def test_full_fraction_is_identity(self):
        idx = ph.split_labels(100, 1.0, combination_seed=5)
        np.testing.assert_array_equal(idx, np.arange(100))

    def test_eighth_of_256(self):
        idx = ph.split_labels(256, 0.125, combination_seed=1)
        assert len(idx) == 32
        assert len(set(idx.tolist())) == 32
        assert idx.min() >= 0 and idx.max() < 256

    def test_different_seeds_differ(self):
        a = ph.split_labels(256, 0.25, 0)
        b = ph.split_labels(256, 0.25, 1)
        assert not np.array_equal(a, b)

    def test_overlap_matches_hypergeometric(self):
        """Overlap of two independent 25% subsets of N=256 follows the
        hypergeometric law: mean 16, sd ~ 3.35; the average of 50 trials
        stays within 3 sigma of the mean."""
        n, k = 256, 64
        expected = k * k / n
        var_single = k * k * (n - k) * (n - k) / (n * n * (n - 1))
        overlaps = []
        for seed in range(50):
            a = set(ph.split_labels(n, 0.25, 2 * seed).tolist())
            b = set(ph.split_labels(n, 0.25, 2 * seed + 1).tolist())
            overlaps.append(len(a & b))
        sigma_of_mean = np.sqrt(var_single / 50)
        assert abs(np.mean(overlaps) - expected) < 3 * sigma_of_mean

    def test_empty_split_rejected(self):
        with pytest.raises(DatasetError, match="empty"):
            ph.split_labels(4, 0.05, 0)
        with pytest.raises(DatasetError, match="fraction"):
            ph.split_labels(4, 0.0, 0)
