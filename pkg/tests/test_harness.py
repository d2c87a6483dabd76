"""Verification harness and experiment machinery (desk-scale units)."""

import numpy as np
import pytest

from esure import (
    Image,
    RngStream,
    build_denoiser,
    evaluate_psnr,
    make_test_set,
    verify_gradient,
    verify_identity_n2n,
    verify_unbiasedness,
)
from esure.datasets import synthetic_corpus, synthetic_texture
from esure.experiments import (
    ExperimentResult,
    read_metrics_csv,
    write_metrics_csv,
    write_plot_data,
)
from esure.losses import EstimatorConfig
from esure.pairing import make_uncorrelated_pair
from esure.plots import render_experiment_figure
from esure.verify import (
    closed_form_risk,
    identity_sweep,
    make_gradient_batch,
    write_report_csv,
)


@pytest.fixture(scope="module")
def clean():
    return synthetic_texture(RngStream(100, "img"), 32, 32)


class TestClosedFormRisk:
    def test_conv_filter_matches_brute_force(self, clean):
        d = build_denoiser("conv_filter")
        k = np.array([[0.05, 0.1, 0.05], [0.1, 0.4, 0.1], [0.05, 0.1, 0.05]])
        d.theta = (k / k.sum()).ravel()
        sigma = 0.1
        risk = closed_form_risk(d, clean, sigma)
        draws = 3000
        noise = RngStream(101, "n").standard_normal((draws,) + clean.shape)
        y = clean.data[None] + sigma * noise
        out = d.forward(y)
        mse = np.einsum("bhwc,bhwc->b", clean.data[None] - out, clean.data[None] - out) / clean.n
        se = mse.std(ddof=1) / np.sqrt(draws)
        assert abs(mse.mean() - risk) <= 4 * se

    def test_soft_threshold_has_no_closed_form(self, clean):
        assert closed_form_risk(build_denoiser("soft_threshold"), clean, 0.1) is None


class TestVerifyUnbiasedness:
    def test_sure_scaling_passes(self, clean):
        report = verify_unbiasedness(
            "sure", build_denoiser("scaling", {"a": 0.5}), clean, 2000, seed=1, sigma=0.1
        )
        assert report.oracle_kind == "closed_form"
        assert report.passed and report.matches_expectation

    def test_sure_soft_threshold_uses_paired_oracle(self, clean):
        report = verify_unbiasedness(
            "sure", build_denoiser("soft_threshold", {"threshold": 0.05}), clean,
            2000, seed=2, sigma=0.1,
        )
        assert report.oracle_kind == "paired_mc"
        assert report.passed

    def test_esure_nested_identity_mean(self, clean):
        # identity risk on the input is the total input variance
        report = verify_unbiasedness(
            "esure_nested", build_denoiser("identity"), clean, 3000, seed=3,
            sigma=25 / 255, sigma_gt=10 / 255,
        )
        assert report.passed
        assert report.empirical_mean == pytest.approx((25 / 255) ** 2, rel=0.1)

    def test_n2n_bias_detected_on_nested_pairs(self, clean):
        biased = verify_unbiasedness(
            "n2n_nested", build_denoiser("scaling", {"a": 0.8}), clean, 3000, seed=4,
            sigma=25 / 255, sigma_gt=10 / 255, expect_unbiased=False,
        )
        assert not biased.passed            # |z| > threshold: bias detected
        assert biased.matches_expectation   # which is what the suite expects
        balanced = verify_unbiasedness(
            "n2n_nested", build_denoiser("scaling", {"a": 0.5}), clean, 3000, seed=4,
            sigma=25 / 255, sigma_gt=10 / 255,
        )
        assert balanced.passed  # bias sigma_gt^2 (1 - 2a) vanishes at a = 1/2

    def test_mc_divergence_mode(self, clean):
        report = verify_unbiasedness(
            "sure", build_denoiser("scaling", {"a": 0.5}), clean, 2000, seed=5,
            sigma=0.1, divergence_mode="monte_carlo",
        )
        assert report.passed

    def test_validation(self, clean):
        with pytest.raises(ValueError):
            verify_unbiasedness("sure", build_denoiser("scaling"), clean, 10, seed=0)
        with pytest.raises(ValueError):
            verify_unbiasedness("bogus", build_denoiser("scaling"), clean, 2000, seed=0)
        cnn = build_denoiser("small_cnn", init_stream=RngStream(0, "i"))
        with pytest.raises(ValueError):
            verify_unbiasedness("sure", cnn, clean, 2000, seed=0)


class TestIdentityCheck:
    def test_single_sample_exact(self, clean):
        pair = make_uncorrelated_pair(clean, 0.12, RngStream(6, "p"))
        for kind in ("identity", "scaling", "conv_filter", "soft_threshold"):
            assert verify_identity_n2n(build_denoiser(kind), pair) == 0.0

    def test_zero_sigma_target(self, clean):
        pair = make_uncorrelated_pair(clean, 0.0, RngStream(7, "p"))
        assert verify_identity_n2n(build_denoiser("scaling", {"a": 0.4}), pair) == 0.0

    def test_sweep(self):
        assert identity_sweep(seed=8, samples=20) <= 1e-12


class TestVerifyGradient:
    def test_scaling_sure_analytic_tight(self):
        batch = make_gradient_batch("clean_target", seed=9)
        err = verify_gradient(
            build_denoiser("scaling", {"a": 0.6}), batch, "sure",
            EstimatorConfig(divergence_mode="analytic"),
        )
        assert err <= 1e-8

    def test_small_cnn_esure_mc(self):
        batch = make_gradient_batch("nested_target", seed=10)
        d = build_denoiser("small_cnn", {"layers": 3, "channels": 4},
                           init_stream=RngStream(10, "init"))
        d.theta = d.theta + 0.02 * RngStream(10, "nudge").standard_normal(d.param_count)
        err = verify_gradient(
            d, batch, "esure", EstimatorConfig(divergence_mode="monte_carlo"),
            max_coords=60, seed=10,
        )
        assert err <= 1e-4

    def test_requires_float64(self):
        batch = make_gradient_batch("clean_target", seed=11)
        d = build_denoiser("scaling", {"dtype": "float32"})
        with pytest.raises(ValueError):
            verify_gradient(d, batch, "sure", EstimatorConfig(divergence_mode="analytic"))


class TestEvaluation:
    def test_identity_denoiser_noise_floor(self):
        cleans = synthetic_corpus(12, count=4, size=64, purpose="test")
        test_set = make_test_set(cleans, 0.1, seed=12)
        _, mean_db, _ = evaluate_psnr(build_denoiser("identity"), test_set)
        assert mean_db == pytest.approx(20.0, abs=0.1)

    def test_perfect_estimate_hits_cap(self):
        cleans = synthetic_corpus(13, count=2, size=32, purpose="test")
        test_set = make_test_set(cleans, 0.0, seed=13)  # zero noise + identity
        _, mean_db, std_db = evaluate_psnr(build_denoiser("identity"), test_set)
        assert mean_db == 120.0 and std_db == 0.0

    def test_test_noise_is_deterministic(self):
        cleans = synthetic_corpus(14, count=2, size=32, purpose="test")
        a = make_test_set(cleans, 0.1, seed=14)
        b = make_test_set(cleans, 0.1, seed=14)
        for s1, s2 in zip(a, b):
            np.testing.assert_array_equal(s1.input.data, s2.input.data)


class TestReportsAndCsv:
    def _results(self):
        return [
            ExperimentResult("N2N", "imperfect_gt", 25.0, g, 28.0 - 0.1 * g, 0.5, 7, "cfg123")
            for g in (1.0, 5.0, 10.0)
        ] + [
            ExperimentResult("eSURE", "imperfect_gt", 25.0, g, 28.4, 0.4, 7, "cfg456")
            for g in (1.0, 5.0, 10.0)
        ]

    def test_metrics_roundtrip_and_append(self, tmp_path):
        path = tmp_path / "metrics.csv"
        rows = self._results()
        write_metrics_csv(path, rows[:3])
        write_metrics_csv(path, rows[3:], append=True)
        back = read_metrics_csv(path)
        assert len(back) == 6
        assert back[0].method == "N2N" and back[-1].method == "eSURE"
        assert back[0].psnr_mean_db == pytest.approx(27.9)
        # appending never duplicates the header
        text = path.read_text()
        assert text.count("method,regime") == 1
        assert text.startswith("# schema=esure-metrics-v1\n")

    def test_plot_data_layout(self, tmp_path):
        path = tmp_path / "plot.csv"
        write_plot_data(path, self._results())
        lines = path.read_text().strip().splitlines()
        assert lines[1] == "sigma_gt_255,N2N,eSURE"
        assert len(lines) == 5  # schema + header + 3 sigma rows

    def test_figure_rendering(self, tmp_path):
        for kind, name in (("imperfect_gt_sweep", "sweep.png"), ("uncorrelated_pairs", "bars.png")):
            out = tmp_path / name
            render_experiment_figure(self._results(), out, kind)
            assert out.exists() and out.stat().st_size > 1000

    def test_verification_report_csv(self, tmp_path, clean):
        report = verify_unbiasedness(
            "sure", build_denoiser("scaling", {"a": 0.5}), clean, 1000, seed=15, sigma=0.1
        )
        path = tmp_path / "verify.csv"
        write_report_csv(path, [report])
        text = path.read_text()
        assert text.startswith("# schema=esure-verification-v1\n")
        assert "closed_form" in text
