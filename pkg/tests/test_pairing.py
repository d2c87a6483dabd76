"""Dataset regimes: noise synthesis, pairing, the averaging transform, patches."""

import numpy as np
import pytest

from esure import (
    Image,
    PairedSample,
    RngStream,
    blind_patch_batch,
    corollary_transform,
    extract_patches,
    make_imperfect_gt_pair,
    make_single,
    make_uncorrelated_pair,
    synth_noisy,
)


def flat(seed=0, size=64, value=0.5):
    return Image(np.full((size, size, 1), value))


class TestSynthNoisy:
    def test_zero_sigma_equals_clean(self):
        clean = flat()
        noisy = synth_noisy(clean, 0.0, RngStream(0, "n"))
        np.testing.assert_array_equal(noisy.data, clean.data)

    def test_mean_bound(self):
        clean = flat()  # N = 4096
        noisy = synth_noisy(clean, 0.1, RngStream(11, "n"))
        assert abs((noisy.data - clean.data).mean()) <= 4 * 0.1 / 64

    def test_disjoint_purposes_are_uncorrelated(self):
        clean = flat()
        a = synth_noisy(clean, 0.1, RngStream(3, "first")).data - clean.data
        b = synth_noisy(clean, 0.1, RngStream(3, "second")).data - clean.data
        corr = np.corrcoef(a.ravel(), b.ravel())[0, 1]
        assert abs(corr) <= 4 / 64  # 4 / sqrt(N)


class TestUncorrelatedPair:
    def test_zero_sigma(self):
        clean = flat()
        pair = make_uncorrelated_pair(clean, 0.0, RngStream(0, "p"))
        np.testing.assert_array_equal(pair.input.data, clean.data)
        np.testing.assert_array_equal(pair.target.data, clean.data)

    def test_mode_and_sigmas(self):
        pair = make_uncorrelated_pair(flat(), 0.2, RngStream(0, "p"))
        assert pair.mode == "independent_target"
        assert pair.sigma_input == pair.sigma_target == 0.2

    def test_noise_covariance_bound(self):
        clean = flat()
        sigma = 0.1
        pair = make_uncorrelated_pair(clean, sigma, RngStream(17, "p"))
        na = (pair.input.data - clean.data).ravel()
        nb = (pair.target.data - clean.data).ravel()
        cov = float(np.mean(na * nb))
        assert abs(cov) <= 4 * sigma**2 / 64  # 4 sigma^2 / sqrt(N)


class TestCorollaryTransform:
    def _pair(self, a, b, sigma=0.1):
        return PairedSample(
            input=Image(np.asarray(a, dtype=float)[None, :, None]),
            target=Image(np.asarray(b, dtype=float)[None, :, None]),
            sigma_input=sigma, sigma_target=sigma, mode="independent_target",
        )

    def test_target_is_arithmetic_mean(self):
        out = corollary_transform(self._pair([1.0, 3.0], [3.0, 1.0]), RngStream(0, "c"))
        np.testing.assert_array_equal(out.target.data.ravel(), [2.0, 2.0])

    def test_output_metadata(self):
        out = corollary_transform(self._pair([1.0, 3.0], [3.0, 1.0], sigma=0.2), RngStream(0, "c"))
        assert out.mode == "nested_target"
        assert out.sigma_input == pytest.approx(0.2)
        assert out.sigma_target == pytest.approx(0.2 / np.sqrt(2))

    def test_target_noise_level(self):
        # many draws: std of (w - clean) -> sigma / sqrt(2) within 5%
        clean = flat(size=64)
        sigma = 0.1
        devs = []
        for rep in range(20):
            pair = make_uncorrelated_pair(clean, sigma, RngStream(5, "rep", rep))
            out = corollary_transform(pair, RngStream(5, "c", rep))
            devs.append(out.target.data - clean.data)
        std = np.std(np.stack(devs))
        assert std == pytest.approx(sigma / np.sqrt(2), rel=0.05)

    def test_fresh_noise_independent_of_target(self):
        # cov(w - clean, v - w) ~ 0: pooled over 100 repeats of N = 4096
        clean = flat(size=64)
        sigma = 0.1
        w_noise, z_noise = [], []
        for rep in range(100):
            pair = make_uncorrelated_pair(clean, sigma, RngStream(29, "rep", rep))
            out = corollary_transform(pair, RngStream(29, "c", rep))
            w_noise.append((out.target.data - clean.data).ravel())
            z_noise.append((out.input.data - out.target.data).ravel())
        w_all = np.concatenate(w_noise)
        z_all = np.concatenate(z_noise)
        cov = float(np.mean(w_all * z_all))
        bound = 4 * (sigma / np.sqrt(2)) ** 2 / np.sqrt(w_all.size)
        assert abs(cov) <= bound

    def test_wrong_mode_rejected(self):
        sample = PairedSample(
            input=flat(size=4), target=flat(size=4),
            sigma_input=0.1, sigma_target=0.0, mode="clean_target",
        )
        with pytest.raises(ValueError):
            corollary_transform(sample, RngStream(0))


class TestImperfectGtPair:
    def test_zero_gt_noise_degenerates_to_supervised(self):
        clean = flat()
        pair = make_imperfect_gt_pair(clean, 0.0, 0.1, RngStream(0, "i"))
        np.testing.assert_array_equal(pair.target.data, clean.data)
        assert pair.mode == "nested_target"

    def test_added_noise_level_formula(self):
        # sigma_gt = 10/255, sigma_noisy = 25/255 -> sigma_z = 22.91/255
        pair = make_imperfect_gt_pair(flat(), 10 / 255, 25 / 255, RngStream(1, "i"))
        sigma_z = np.sqrt((25 / 255) ** 2 - (10 / 255) ** 2)
        assert sigma_z * 255 == pytest.approx(22.9128, abs=1e-3)
        assert pair.sigma_input == pytest.approx(25 / 255)
        assert pair.sigma_target == pytest.approx(10 / 255)

    def test_total_input_noise_level(self):
        clean = flat(size=64)
        devs = [
            make_imperfect_gt_pair(clean, 10 / 255, 25 / 255, RngStream(7, "rep", r)).input.data
            - clean.data
            for r in range(20)
        ]
        assert np.std(np.stack(devs)) == pytest.approx(25 / 255, rel=0.05)

    def test_added_sigma_mode(self):
        pair = make_imperfect_gt_pair(
            flat(), 0.04, 0.1, RngStream(0, "i"), sigma_mode="added_sigma"
        )
        assert pair.sigma_input == pytest.approx(np.sqrt(0.04**2 + 0.1**2))

    def test_requires_strictly_added_noise(self):
        with pytest.raises(ValueError):
            make_imperfect_gt_pair(flat(), 0.1, 0.1, RngStream(0))
        with pytest.raises(ValueError):
            make_imperfect_gt_pair(flat(), 0.2, 0.1, RngStream(0))

    def test_noise_variance_additivity(self):
        # Var(in - clean) = Var(tg - clean) + Var(in - tg) within 5%
        clean = flat(size=64)
        pair = make_imperfect_gt_pair(clean, 0.06, 0.12, RngStream(23, "i"))
        v_total = np.var(pair.input.data - clean.data)
        v_gt = np.var(pair.target.data - clean.data)
        v_z = np.var(pair.input.data - pair.target.data)
        assert v_total == pytest.approx(v_gt + v_z, rel=0.05)


class TestExtractPatches:
    def _numbered_sample(self, size=4):
        data = np.arange(size * size, dtype=float).reshape(size, size, 1)
        img = Image(data)
        return PairedSample(input=img, target=img, sigma_input=0.0,
                            sigma_target=0.0, mode="clean_target", clean=img)

    def test_grid_count_and_row_major_order(self):
        batch = extract_patches([self._numbered_sample(4)], 2, 2)
        assert len(batch) == 4
        np.testing.assert_array_equal(batch.inputs[0][:, :, 0], [[0, 1], [4, 5]])
        np.testing.assert_array_equal(batch.inputs[1][:, :, 0], [[2, 3], [6, 7]])
        np.testing.assert_array_equal(batch.inputs[2][:, :, 0], [[8, 9], [12, 13]])

    def test_grid_formula(self):
        img = Image(np.zeros((180, 180, 1)))
        sample = PairedSample(input=img, target=img, sigma_input=0.0,
                              sigma_target=0.0, mode="clean_target")
        batch = extract_patches([sample], 50, 40)
        assert len(batch) == 16  # (floor((180-50)/40)+1)^2

    def test_augmentation_is_paired(self):
        # zero-noise pairs: input and target patches stay identical under
        # whatever transform was drawn
        batch = extract_patches(
            [self._numbered_sample(6)], 3, 3, augment=True, stream=RngStream(3, "aug")
        )
        np.testing.assert_array_equal(batch.inputs, batch.targets)

    def test_augmentation_deterministic(self):
        sample = self._numbered_sample(6)
        b1 = extract_patches([sample], 3, 3, augment=True, stream=RngStream(9, "aug"))
        b2 = extract_patches([sample], 3, 3, augment=True, stream=RngStream(9, "aug"))
        np.testing.assert_array_equal(b1.inputs, b2.inputs)

    def test_patch_larger_than_image_rejected(self):
        with pytest.raises(ValueError):
            extract_patches([self._numbered_sample(4)], 5, 1)

    def test_mixed_modes_rejected(self):
        a = self._numbered_sample(4)
        img = Image(np.zeros((4, 4, 1)))
        b = PairedSample(input=img, target=img, sigma_input=0.1,
                         sigma_target=0.1, mode="independent_target")
        with pytest.raises(ValueError):
            extract_patches([a, b], 2, 2)


class TestBlindPatches:
    def test_per_patch_sigma_range_and_shapes(self):
        cleans = [flat(size=16, value=0.4), flat(size=16, value=0.6)]
        batch = blind_patch_batch(
            cleans, "single", 0.0, 55 / 255, patch_size=8, stride=8,
            stream=RngStream(0, "blind"),
        )
        assert len(batch) == 8
        assert batch.mode == "clean_target"
        assert np.all(batch.sigma_input >= 0.0)
        assert np.all(batch.sigma_input <= 55 / 255)
        assert len(np.unique(batch.sigma_input)) > 1  # truly per patch

    def test_pair_regime(self):
        batch = blind_patch_batch(
            [flat(size=8)], "uncorrelated_pair", 0.05, 0.2, patch_size=8, stride=8,
            stream=RngStream(1, "blind"),
        )
        assert batch.mode == "independent_target"
        np.testing.assert_array_equal(batch.sigma_input, batch.sigma_target)

    def test_imperfect_regime_respects_gt_floor(self):
        batch = blind_patch_batch(
            [flat(size=8)], "imperfect_gt", 0.0, 0.2, patch_size=4, stride=4,
            stream=RngStream(2, "blind"), sigma_gt=0.05,
        )
        assert batch.mode == "nested_target"
        assert np.all(batch.sigma_input > 0.05)
        assert np.all(batch.sigma_target == 0.05)
