"""Synthetic corpus and manifest materialization."""

import numpy as np
import pytest

from esure import RngStream, read_tensor, write_pgm
from esure.datasets import (
    Manifest,
    load_clean_dir,
    load_samples,
    materialize,
    read_manifest,
    synthesize_samples,
    synthetic_corpus,
    synthetic_texture,
)


class TestSyntheticCorpus:
    def test_textures_are_in_range_and_varied(self):
        images = synthetic_corpus(0, count=6, size=48)
        for img in images:
            assert img.shape == (48, 48, 1)
            assert img.data.min() >= 0.05 and img.data.max() <= 0.95
        # images genuinely differ
        assert np.abs(images[0].data - images[1].data).max() > 0.1
        # and have structure (not flat): nontrivial local variation
        assert np.abs(np.diff(images[0].data[:, :, 0], axis=0)).mean() > 1e-3

    def test_deterministic_and_purpose_disjoint(self):
        a = synthetic_corpus(5, count=2, size=32)
        b = synthetic_corpus(5, count=2, size=32)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        test = synthetic_corpus(5, count=2, size=32, purpose="test")
        assert np.abs(a[0].data - test[0].data).max() > 1e-3


class TestSynthesizeSamples:
    def test_common_random_numbers_across_sigma(self):
        cleans = synthetic_corpus(1, count=2, size=16)
        lo = synthesize_samples(cleans, "imperfect_gt", 25.0, seed=3, sigma_gt_255=1.0)
        hi = synthesize_samples(cleans, "imperfect_gt", 25.0, seed=3, sigma_gt_255=10.0)
        # same unit noise field scaled by sigma_gt: correlation is exactly 1
        n_lo = (lo[0].target.data - cleans[0].data).ravel()
        n_hi = (hi[0].target.data - cleans[0].data).ravel()
        corr = np.corrcoef(n_lo, n_hi)[0, 1]
        assert corr == pytest.approx(1.0, abs=1e-12)

    def test_regime_modes(self):
        cleans = synthetic_corpus(2, count=1, size=16)
        assert synthesize_samples(cleans, "single", 25.0, 0)[0].mode == "clean_target"
        assert synthesize_samples(cleans, "uncorrelated_pair", 25.0, 0)[0].mode == "independent_target"
        nested = synthesize_samples(cleans, "imperfect_gt", 25.0, 0, sigma_gt_255=5.0)[0]
        assert nested.mode == "nested_target"
        averaged = synthesize_samples(cleans, "uncorrelated_pair", 25.0, 0, use_corollary=True)[0]
        assert averaged.mode == "nested_target"
        assert averaged.sigma_target == pytest.approx(25.0 / 255 / np.sqrt(2))

    def test_unknown_regime(self):
        with pytest.raises(ValueError):
            synthesize_samples([], "bogus", 25.0, 0)


class TestManifest:
    def test_materialize_and_reload(self, tmp_path):
        cleans = synthetic_corpus(4, count=3, size=16)
        manifest = materialize(cleans, "imperfect_gt", 25.0, seed=9,
                               out_dir=tmp_path, sigma_gt_255=10.0)
        assert len(manifest.items) == 3
        back = read_manifest(tmp_path / "manifest.json")
        assert back.regime == "imperfect_gt"
        assert back.sigma_gt_255 == 10.0
        samples = load_samples(back, tmp_path)
        assert samples[0].mode == "nested_target"
        assert samples[0].sigma_input == pytest.approx(25 / 255)
        # tensors round-trip through f32
        direct = read_tensor(tmp_path / manifest.items[0].input)
        np.testing.assert_array_equal(direct.data, samples[0].input.data)

    def test_unsupported_schema_rejected(self, tmp_path):
        (tmp_path / "m.json").write_text('{"schema": "other-v9", "items": []}')
        with pytest.raises(ValueError):
            read_manifest(tmp_path / "m.json")


class TestLoadCleanDir:
    def test_reads_pgms_sorted(self, tmp_path):
        for i, level in enumerate((0.2, 0.8)):
            write_pgm(np.full((8, 8, 1), level), tmp_path / f"img{i}.pgm")
        images = load_clean_dir(tmp_path)
        assert len(images) == 2
        assert images[0].data.mean() < images[1].data.mean()

    def test_empty_dir_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_clean_dir(tmp_path)
