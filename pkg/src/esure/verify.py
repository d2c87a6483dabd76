"""Empirical verification of the estimator claims.

Three families of checks:

* unbiasedness: the sample mean of an estimator over K fresh noise draws is
  compared, via a z-score, against an independent risk oracle (closed form
  for linear denoisers, a paired brute-force MSE mean otherwise),
* the exact identity between the paired estimator on independent pairs and
  the Noise2Noise loss minus its constant,
* gradient exactness against central finite differences with frozen probes.

The Noise2Noise loss is also run *as if* it were an MSE estimator on nested
pairs, where it must fail the z-test for gains != 1/2: that failure is
asserted, not tolerated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .cnn import depthwise_conv2d_same
from .denoisers import (
    ConvFilterDenoiser,
    Denoiser,
    IdentityDenoiser,
    ScalingDenoiser,
    SoftThresholdDenoiser,
    build_denoiser,
)
from .images import Image
from .losses import EstimatorConfig, esure_loss, loss_gradient, loss_value, n2n_loss
from .pairing import PairedSample, PatchBatch, make_uncorrelated_pair
from .rng import RngStream

REPORT_SCHEMA = "esure-verification-v1"

ESTIMATORS = ("sure", "esure_nested", "esure_independent", "n2n_nested")


@dataclass
class VerificationReport:
    estimator: str
    denoiser_kind: str
    draws: int
    empirical_mean: float
    standard_error: float
    oracle_risk: float
    oracle_kind: str  # closed_form | paired_mc
    z_score: float
    threshold: float
    expect_unbiased: bool = True
    detail: str = ""

    @property
    def passed(self) -> bool:
        """Unbiasedness verdict: |z| within threshold."""
        return abs(self.z_score) <= self.threshold

    @property
    def matches_expectation(self) -> bool:
        return self.passed == self.expect_unbiased


def closed_form_risk(denoiser: Denoiser, clean: Image, sigma_input: float) -> float | None:
    """Exact expected per-pixel MSE of h(clean + noise) for linear kinds.

    For a linear map A: risk = ||(A - I) x||^2 / N + sigma^2 tr(A^T A) / N.
    Returns None when no closed form is available (nonlinear kinds).
    """
    x = clean.data
    n = x.size
    s2 = sigma_input**2
    if isinstance(denoiser, IdentityDenoiser):
        return s2
    if isinstance(denoiser, ScalingDenoiser):
        a = denoiser.a
        return (1.0 - a) ** 2 * float(np.mean(x**2)) + a**2 * s2
    if isinstance(denoiser, ConvFilterDenoiser):
        ax = denoiser.forward(x)
        bias_term = float(np.mean((ax - x) ** 2))
        # tr(A^T A) = sum over pixels of the squared in-bounds kernel taps
        ones = np.ones_like(x)[None]
        tr_ata = float(np.sum(depthwise_conv2d_same(ones, denoiser.kernel**2)))
        return bias_term + s2 * tr_ata / n
    return None


def _estimator_values(
    estimator: str,
    denoiser: Denoiser,
    clean: Image,
    sigma: float,
    sigma_gt: float,
    stream: RngStream,
    draws: int,
    chunk: int,
    divergence_mode: str,
    kappa: float,
):
    """Vectorized per-draw (estimator value, true per-draw MSE) arrays."""
    x = clean.data[None]
    n = clean.n
    sigma_z = math.sqrt(max(sigma**2 - sigma_gt**2, 0.0))
    values = np.empty(draws)
    true_mse = np.empty(draws)
    done = 0
    batch_index = 0
    while done < draws:
        b = min(chunk, draws - done)
        sub = stream.child("draws", batch_index)
        shape = (b,) + clean.shape
        if estimator == "sure":
            y_in = x + sigma * sub.child("n").standard_normal(shape)
            target = y_in
            coef_sigma = sigma
        elif estimator in ("esure_nested", "n2n_nested"):
            y1 = x + sigma_gt * sub.child("gt").standard_normal(shape)
            y_in = y1 + sigma_z * sub.child("z").standard_normal(shape)
            target = y1
            coef_sigma = sigma_gt
        elif estimator == "esure_independent":
            y_in = x + sigma * sub.child("a").standard_normal(shape)
            target = x + sigma * sub.child("b").standard_normal(shape)
            coef_sigma = sigma
        else:
            raise ValueError(f"unknown estimator {estimator!r}")

        out = denoiser.forward(y_in)
        fid = np.einsum("bhwc,bhwc->b", target - out, target - out) / n
        vals = fid - coef_sigma**2
        if estimator == "n2n_nested":
            vals = fid  # the raw regression loss, claimed as an MSE estimate
        elif estimator != "esure_independent":
            if divergence_mode == "analytic":
                div = denoiser.analytic_divergence_batch(y_in)
            else:
                eps = kappa * sigma if sigma > 0 else kappa
                probes = sub.child("probe").standard_normal(shape)
                delta = denoiser.forward(y_in + eps * probes) - out
                div = np.einsum("bhwc,bhwc->b", probes, delta) / eps
            vals = vals + (2.0 * coef_sigma**2 / n) * div
        values[done : done + b] = vals
        err = x - out
        true_mse[done : done + b] = np.einsum("bhwc,bhwc->b", err, err) / n
        done += b
        batch_index += 1
    return values, true_mse


def _z_score(mean: float, oracle: float, se: float) -> tuple[float, float]:
    """(z, se), guarding estimators that are exactly constant in the noise.

    The single-realization estimator on the identity map is sigma^2 for
    every draw; its sample std is pure float dust, so the ratio test is
    replaced by an absolute comparison at roundoff scale.
    """
    scale = max(abs(oracle), abs(mean), 1e-30)
    if se <= 1e-13 * scale:
        z = 0.0 if abs(mean - oracle) <= 1e-12 * scale else math.inf
        return z, se
    return (mean - oracle) / se, se


def verify_unbiasedness(
    estimator: str,
    denoiser: Denoiser,
    clean: Image,
    draws: int,
    seed: int,
    sigma: float = 0.1,
    sigma_gt: float = 0.0,
    threshold: float = 4.0,
    divergence_mode: str = "analytic",
    kappa: float = 1.6e-4,
    expect_unbiased: bool = True,
    chunk: int = 1000,
    stream_tag: str = "",
) -> VerificationReport:
    """Average ``estimator`` over ``draws`` fresh noise instances and z-test
    it against an independent risk oracle.

    ``sigma`` is the input noise std; nested estimators additionally take
    ``sigma_gt`` (target noise std, with the remainder added on top).  For
    linear denoisers the oracle is the closed-form risk; otherwise the
    paired per-draw true MSE (computed from the clean oracle) is averaged
    with the same draws and the z-score is formed from the paired
    differences.
    """
    if draws < 1000:
        raise ValueError(f"need at least 1000 draws for a meaningful z-test, got {draws}")
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r} (expected one of {ESTIMATORS})")
    if estimator in ("esure_nested", "n2n_nested") and not 0 <= sigma_gt < sigma:
        raise ValueError(f"nested estimators need 0 <= sigma_gt < sigma, got {sigma_gt}, {sigma}")
    if denoiser.kind == "small_cnn":
        raise ValueError("unbiasedness verification needs an oracle-friendly denoiser kind")

    stream = RngStream(seed, "verify", estimator, denoiser.kind, stream_tag)
    values, true_mse = _estimator_values(
        estimator, denoiser, clean, sigma, sigma_gt, stream, draws, chunk,
        divergence_mode, kappa,
    )
    mean = float(values.mean())
    oracle = closed_form_risk(denoiser, clean, sigma)
    if oracle is not None and estimator != "n2n_nested":
        se = float(values.std(ddof=1) / math.sqrt(draws))
        z, se = _z_score(mean, oracle, se)
        oracle_kind = "closed_form"
    elif oracle is not None:
        # n2n-as-estimator: compare against the true risk, scale from the
        # paired differences so the test is sharp
        diffs = values - true_mse
        se = float(diffs.std(ddof=1) / math.sqrt(draws))
        z, se = _z_score(float(diffs.mean()), 0.0, se)
        oracle_kind = "closed_form"
        oracle = float(oracle)
    else:
        diffs = values - true_mse
        se = float(diffs.std(ddof=1) / math.sqrt(draws))
        z, se = _z_score(float(diffs.mean()), 0.0, se)
        oracle = float(true_mse.mean())
        oracle_kind = "paired_mc"
    return VerificationReport(
        estimator=estimator,
        denoiser_kind=denoiser.kind,
        draws=draws,
        empirical_mean=mean,
        standard_error=se,
        oracle_risk=float(oracle),
        oracle_kind=oracle_kind,
        z_score=float(z),
        threshold=threshold,
        expect_unbiased=expect_unbiased,
        detail=f"sigma={sigma:.6g},sigma_gt={sigma_gt:.6g},div={divergence_mode}",
    )


def _zoo(dtype="float64") -> list[Denoiser]:
    return [
        build_denoiser("identity", {"dtype": dtype}),
        build_denoiser("scaling", {"a": 0.3, "dtype": dtype}),
        build_denoiser("scaling", {"a": 0.7, "dtype": dtype}),
        build_denoiser("conv_filter", {"dtype": dtype}),
        build_denoiser("soft_threshold", {"threshold": 0.05, "dtype": dtype}),
    ]


def _blur_kernel() -> np.ndarray:
    k = np.array([[0.05, 0.10, 0.05], [0.10, 0.40, 0.10], [0.05, 0.10, 0.05]])
    return k / k.sum()


def unbiasedness_suite(
    clean: Image,
    draws: int = 20000,
    seed: int = 0,
    sigma: float = 25.0 / 255.0,
    sigma_gt: float = 10.0 / 255.0,
    threshold: float = 4.0,
) -> list[VerificationReport]:
    """The standard verification matrix, including the designed failures.

    SURE and the paired estimator (nested and independent) must pass for
    every analytic denoiser; the Noise2Noise loss read as an MSE estimator
    on nested pairs must pass at gain 1/2 (its bias vanishes there) and
    fail at any other gain.
    """
    zoo = _zoo()
    blur = build_denoiser("conv_filter")
    blur.theta = _blur_kernel().ravel()
    zoo[3] = blur
    reports = []
    for estimator in ("sure", "esure_nested", "esure_independent"):
        for case, d in enumerate(zoo):
            reports.append(
                verify_unbiasedness(
                    estimator, d, clean, draws, seed,
                    sigma=sigma, sigma_gt=sigma_gt if estimator == "esure_nested" else 0.0,
                    threshold=threshold, stream_tag=f"case{case}",
                )
            )
    # regression-to-noisy-target read as an MSE estimate: unbiased only at a=1/2
    for case, (a, expect) in enumerate(((0.5, True), (0.8, False))):
        reports.append(
            verify_unbiasedness(
                "n2n_nested", build_denoiser("scaling", {"a": a}), clean, draws, seed,
                sigma=sigma, sigma_gt=sigma_gt, threshold=threshold,
                expect_unbiased=expect, stream_tag=f"n2n{case}",
            )
        )
    return reports


# ---------------------------------------------------------------------------
# Exact identity: paired estimator on independent pairs == N2N - sigma^2


def verify_identity_n2n(denoiser: Denoiser, sample: PairedSample) -> float:
    """|esure(independent) - (n2n - sigma_target^2)| for one sample."""
    if sample.mode != "independent_target":
        raise ValueError(f"identity check needs an independent pair, got {sample.mode!r}")
    cfg = EstimatorConfig(divergence_mode="analytic")
    lhs = esure_loss(sample, denoiser, cfg).value
    rhs = n2n_loss(denoiser, sample.input, sample.target).value - sample.sigma_target**2
    return abs(lhs - rhs)


def identity_sweep(seed: int = 0, samples: int = 100, size: int = 16) -> float:
    """Max deviation over random samples x the four analytic denoiser kinds."""
    from .datasets import synthetic_texture  # local import to avoid a cycle

    stream = RngStream(seed, "identity-sweep")
    zoo = _zoo()[:4] + [build_denoiser("soft_threshold", {"threshold": 0.05})]
    worst = 0.0
    for i in range(samples):
        clean = synthetic_texture(stream.child("img", i), size, size)
        sigma = float(stream.child("sigma", i).uniform(0.02, 0.3))
        pair = make_uncorrelated_pair(clean, sigma, stream.child("pair", i))
        for d in zoo:
            worst = max(worst, verify_identity_n2n(d, pair))
    return worst


# ---------------------------------------------------------------------------
# Gradient exactness


def verify_gradient(
    denoiser: Denoiser,
    batch: PatchBatch,
    loss_kind: str,
    cfg: EstimatorConfig | None = None,
    fd_step: float = 1e-6,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error of the analytic gradient against central finite
    differences, with frozen probes so the Monte-Carlo loss is a fixed
    deterministic function of the parameters.

    Coordinates are subsampled (at most ``max_coords``) for large parameter
    vectors; the error is normalized by the largest finite-difference
    magnitude over the sampled set.
    """
    if denoiser.dtype != np.float64:
        raise ValueError("gradient verification requires a float64 denoiser")
    probes = None
    if cfg is not None and cfg.divergence_mode == "monte_carlo":
        probes = RngStream(seed, "frozen-probe").standard_normal(batch.inputs.shape)

    grad = loss_gradient(loss_kind, batch, denoiser, cfg, probes=probes)
    p = denoiser.param_count
    if p == 0:
        return 0.0
    if p <= max_coords:
        coords = np.arange(p)
    else:
        coords = RngStream(seed, "coords").permutation(p)[:max_coords]

    theta0 = denoiser.theta.copy()
    fd = np.empty(len(coords))
    for j, i in enumerate(coords):
        for sign, slot in ((+1, 0), (-1, 1)):
            theta = theta0.copy()
            theta[i] += sign * fd_step
            denoiser.theta = theta
            value = loss_value(loss_kind, batch, denoiser, cfg, probes=probes)
            if slot == 0:
                plus = value
            else:
                minus = value
        fd[j] = (plus - minus) / (2.0 * fd_step)
    denoiser.theta = theta0
    scale = max(float(np.max(np.abs(fd))), 1e-12)
    return float(np.max(np.abs(grad[coords] - fd)) / scale)


def make_gradient_batch(mode: str, seed: int = 0, count: int = 4, size: int = 12,
                        sigma: float = 0.1, sigma_gt: float = 0.04) -> PatchBatch:
    """Small float64 batch of the given pair mode for gradient checks."""
    from .datasets import synthetic_texture  # local import to avoid a cycle
    from .pairing import extract_patches, make_imperfect_gt_pair, make_single

    stream = RngStream(seed, "grad-batch", mode)
    samples = []
    for i in range(count):
        clean = synthetic_texture(stream.child("img", i), size, size)
        if mode == "clean_target":
            samples.append(make_single(clean, sigma, stream.child("s", i)))
        elif mode == "independent_target":
            samples.append(make_uncorrelated_pair(clean, sigma, stream.child("s", i)))
        else:
            samples.append(
                make_imperfect_gt_pair(clean, sigma_gt, sigma, stream.child("s", i))
            )
    return extract_patches(samples, size, size)


def gradient_suite(seed: int = 0) -> list[dict]:
    """The standard gradient-exactness matrix for the verify CLI.

    Linear/elementwise kinds must match finite differences to 1e-8, the CNN
    to 1e-4 (its loss surface has genuine curvature and ReLU kinks).
    """
    singles = make_gradient_batch("clean_target", seed)
    pairs = make_gradient_batch("independent_target", seed)
    nested = make_gradient_batch("nested_target", seed)

    blur = build_denoiser("conv_filter")
    blur.theta = _blur_kernel().ravel()
    cnn_net = build_denoiser(
        "small_cnn", {"layers": 4, "channels": 8},
        init_stream=RngStream(seed, "grad-cnn-init"),
    )
    # perturb the CNN away from the identity start so gradients are generic
    nudge = RngStream(seed, "grad-cnn-nudge").standard_normal(cnn_net.param_count)
    cnn_net.theta = cnn_net.theta + 0.02 * nudge

    analytic = EstimatorConfig(divergence_mode="analytic")
    mc = EstimatorConfig(divergence_mode="monte_carlo")

    cases = [
        ("scaling/sure/analytic", build_denoiser("scaling", {"a": 0.6}), singles, "sure", analytic, 1e-8),
        ("scaling/sure/mc", build_denoiser("scaling", {"a": 0.6}), singles, "sure", mc, 1e-8),
        ("conv_filter/sure/analytic", blur, singles, "sure", analytic, 1e-8),
        ("conv_filter/esure/mc", blur.clone(), nested, "esure", mc, 1e-8),
        ("soft_threshold/sure/analytic", build_denoiser("soft_threshold", {"threshold": 0.05}), singles, "sure", analytic, 1e-8),
        ("scaling/n2n", build_denoiser("scaling", {"a": 0.6}), pairs, "n2n", None, 1e-8),
        ("scaling/mse", build_denoiser("scaling", {"a": 0.6}), singles, "mse", None, 1e-8),
        ("small_cnn/mse", cnn_net.clone(), singles, "mse", None, 1e-4),
        ("small_cnn/sure/mc", cnn_net.clone(), singles, "sure", mc, 1e-4),
        ("small_cnn/n2n", cnn_net.clone(), pairs, "n2n", None, 1e-4),
        ("small_cnn/esure/mc", cnn_net.clone(), nested, "esure", mc, 1e-4),
        ("small_cnn/esure/independent", cnn_net.clone(), pairs, "esure", mc, 1e-4),
    ]
    results = []
    for name, denoiser, batch, kind, cfg, tol in cases:
        err = verify_gradient(denoiser, batch, kind, cfg, seed=seed)
        results.append({"name": name, "max_rel_err": err, "tolerance": tol})
    return results


# ---------------------------------------------------------------------------
# Report CSV


REPORT_COLUMNS = (
    "estimator", "denoiser", "draws", "empirical_mean", "standard_error",
    "oracle_risk", "oracle_kind", "z_score", "threshold", "expect_unbiased",
    "passed", "matches_expectation", "detail",
)


def write_report_csv(path, reports: list[VerificationReport]) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# schema={REPORT_SCHEMA}\n")
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow([
                r.estimator, r.denoiser_kind, r.draws,
                f"{r.empirical_mean:.10g}", f"{r.standard_error:.6g}",
                f"{r.oracle_risk:.10g}", r.oracle_kind, f"{r.z_score:.4f}",
                f"{r.threshold:g}", int(r.expect_unbiased), int(r.passed),
                int(r.matches_expectation), r.detail,
            ])
