"""Scalar training losses for Gaussian denoising and their exact gradients.

All losses are normalized per pixel (1/N inside), so a minibatch aggregate
is a plain mean.  For an N-pixel observation y = x + n with n ~ N(0, s^2 I)
and denoiser h:

* ``mse_loss``    (1/N) ||clean - h(input)||^2            (supervised oracle)
* ``sure_loss``   (1/N) ||y - h(y)||^2 - s^2 + (2 s^2/N) div(y)
* ``esure_loss``  nested pair (target y1, input y2 = y1 + z):
                  (1/N) ||y1 - h(y2)||^2 - s_t^2 + (2 s_t^2/N) div(y2)
                  where s_t is the *target* noise std; for independent
                  pairs the divergence coefficient is identically zero and
                  the loss reduces to ``n2n_loss`` minus the constant s_t^2.
* ``n2n_loss``    (1/N) ||target - h(input)||^2            (Noise2Noise)

div(y) = sum_i d(h_i)/d(y_i) is either the closed form (analytic kinds) or
the randomized estimate (1/eps) p^T (h(y + eps p) - h(y)) with a standard
normal probe p, drawn fresh per sample per call.

The expectation of each estimator equals the true MSE against the unknown
clean image under its stated noise model; the verification harness checks
this empirically against closed-form and brute-force oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .denoisers import Denoiser
from .images import as_array
from .pairing import PairedSample, PatchBatch
from .rng import RngStream

LossKind = Literal["mse", "sure", "esure", "n2n"]
LOSS_KINDS = ("mse", "sure", "esure", "n2n")

DivergenceMode = Literal["analytic", "monte_carlo"]

DEFAULT_KAPPA = 1.6e-4  # per-sigma probe step coefficient, 0-255 sigma units


def epsilon_rule(sigma_255: float, kappa: float = DEFAULT_KAPPA) -> float:
    """Probe step proportional to the noise level: kappa * sigma.

    ``sigma_255`` is in the 0-255 convention; the returned step is in
    normalized intensity units.  Since both sides scale together, the rule
    is equivalently epsilon = kappa * sigma in normalized units.
    """
    if sigma_255 < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma_255}")
    if kappa <= 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    return kappa * sigma_255 / 255.0


@dataclass
class EstimatorConfig:
    """How to evaluate divergence terms.

    In ``monte_carlo`` mode the probe step is ``epsilon`` when set,
    otherwise the per-sigma rule ``kappa * sigma``.  ``probe_stream``
    supplies fresh probes; tests may instead pass explicit probes to freeze
    the randomness.
    """

    divergence_mode: DivergenceMode = "monte_carlo"
    epsilon: float | None = None
    kappa: float = DEFAULT_KAPPA
    probe_stream: RngStream | None = None

    def __post_init__(self):
        if self.divergence_mode not in ("analytic", "monte_carlo"):
            raise ValueError(f"unknown divergence mode {self.divergence_mode!r}")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")

    def epsilon_for(self, sigma: float) -> float:
        """Probe step for one sample; sigma in normalized units."""
        eps = self.epsilon if self.epsilon is not None else self.kappa * sigma
        if eps <= 0:
            raise ValueError(
                f"monte_carlo divergence needs a positive step (sigma={sigma}); "
                "use analytic mode or a fixed epsilon"
            )
        return eps

    def draw_probe(self, shape) -> np.ndarray:
        if self.probe_stream is None:
            raise ValueError("no probe_stream configured and no explicit probe given")
        return self.probe_stream.standard_normal(shape)


@dataclass(frozen=True)
class EstimateValue:
    """A scalar risk estimate with provenance metadata."""

    value: float
    estimator: str
    divergence_mode: str | None = None
    epsilon: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite estimate {self.value!r} from {self.estimator}")


def mse_loss(denoiser: Denoiser, input_image, clean) -> EstimateValue:
    """Supervised per-pixel MSE against the clean oracle."""
    x = as_array(input_image)
    c = as_array(clean)
    if x.shape != c.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {c.shape}")
    out = denoiser.forward(x)
    return EstimateValue(float(np.mean((c - out) ** 2)), "mse")


def n2n_loss(denoiser: Denoiser, input_image, target) -> EstimateValue:
    """Noisy-target regression: per-pixel MSE against another realization."""
    x = as_array(input_image)
    t = as_array(target)
    if x.shape != t.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {t.shape}")
    out = denoiser.forward(x)
    return EstimateValue(float(np.mean((t - out) ** 2)), "n2n")


def mc_divergence(denoiser: Denoiser, y, epsilon: float, probe) -> float:
    """Randomized divergence estimate (1/eps) p^T (h(y + eps p) - h(y)).

    Returns the *unnormalized* divergence (callers apply 1/N).  Exact for
    linear denoisers at any epsilon; otherwise a directional finite
    difference whose expectation over p converges to the divergence.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    y_arr = as_array(y)
    p = as_array(probe)
    if p.shape != y_arr.shape:
        raise ValueError(f"probe shape {p.shape} != input shape {y_arr.shape}")
    delta = denoiser.forward(y_arr + epsilon * p) - denoiser.forward(y_arr)
    return float(np.sum(p * delta) / epsilon)


def sure_loss(denoiser: Denoiser, y, sigma: float, cfg: EstimatorConfig, probe=None) -> EstimateValue:
    """Single-realization unbiased risk estimate.

    (1/N) ||y - h(y)||^2 - sigma^2 + (2 sigma^2 / N) * div, with div either
    closed-form or the Monte-Carlo estimate with one fresh probe per call.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    y_arr = as_array(y)
    n = y_arr.size
    out = denoiser.forward(y_arr)
    fid = float(np.mean((y_arr - out) ** 2))
    epsilon = None
    if cfg.divergence_mode == "analytic":
        div = denoiser.analytic_divergence(y_arr)
    else:
        epsilon = cfg.epsilon_for(sigma)
        p = probe if probe is not None else cfg.draw_probe(y_arr.shape)
        div = mc_divergence(denoiser, y_arr, epsilon, p)
    value = fid - sigma**2 + (2.0 * sigma**2 / n) * div
    return EstimateValue(value, "sure", cfg.divergence_mode, epsilon)


def esure_loss(sample: PairedSample, denoiser: Denoiser, cfg: EstimatorConfig, probe=None) -> EstimateValue:
    """Paired unbiased risk estimate.

    Nested pairs (input noise strictly contains target noise) get the full
    divergence correction scaled by the *target* noise variance; independent
    pairs drop it, since the cross term vanishes in expectation, leaving the
    Noise2Noise fidelity minus the constant sigma_target^2.
    """
    if sample.mode == "clean_target":
        raise ValueError("clean-target samples belong to mse_loss, not esure_loss")
    y_arr = sample.input.data
    t_arr = sample.target.data
    n = y_arr.size
    sig_t = sample.sigma_target
    out = denoiser.forward(y_arr)
    fid = float(np.mean((t_arr - out) ** 2))
    if sample.mode == "independent_target":
        return EstimateValue(fid - sig_t**2, "esure", None, None)
    epsilon = None
    if cfg.divergence_mode == "analytic":
        div = denoiser.analytic_divergence(y_arr)
    else:
        epsilon = cfg.epsilon_for(sample.sigma_input)
        p = probe if probe is not None else cfg.draw_probe(y_arr.shape)
        div = mc_divergence(denoiser, y_arr, epsilon, p)
    value = fid - sig_t**2 + (2.0 * sig_t**2 / n) * div
    return EstimateValue(value, "esure", cfg.divergence_mode, epsilon)


# ---------------------------------------------------------------------------
# Minibatch loss and exact gradient

_MODE_FOR_KIND = {
    "mse": ("clean_target",),
    "sure": ("clean_target",),
    "n2n": ("independent_target", "nested_target"),
    "esure": ("independent_target", "nested_target"),
}


def _check_batch(kind: str, batch: PatchBatch) -> None:
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    if batch.mode not in _MODE_FOR_KIND[kind]:
        raise ValueError(f"loss {kind!r} is incompatible with {batch.mode!r} samples")
    if kind == "mse" and batch.cleans is None:
        raise ValueError("mse loss needs clean oracles in the batch")


def _loss_core(kind: str, batch: PatchBatch, denoiser: Denoiser,
               cfg: EstimatorConfig | None, probes, need_grad: bool):
    _check_batch(kind, batch)
    b = len(batch)
    n = batch.inputs[0].size
    dtype = denoiser.dtype

    x = batch.inputs.astype(dtype, copy=False)
    if kind == "mse":
        targets = batch.cleans.astype(dtype, copy=False)
    elif kind == "sure":
        targets = x
    else:
        targets = batch.targets.astype(dtype, copy=False)

    out, cache = denoiser.forward_cached(x)
    resid = out - targets
    fid = np.einsum("bhwc,bhwc->b", resid, resid).astype(np.float64) / n
    value = float(np.mean(fid))

    if kind == "sure":
        sig = batch.sigma_input
    elif kind == "esure":
        sig = batch.sigma_target
    else:
        sig = None
    if sig is not None:
        value -= float(np.mean(sig**2))

    needs_div = kind == "sure" or (kind == "esure" and batch.mode == "nested_target")
    grad = None
    cot_fid = None
    if need_grad:
        cot_fid = (2.0 / (n * b)) * resid

    if not needs_div:
        if need_grad:
            grad = denoiser.param_vjp(x, cot_fid.astype(dtype, copy=False), cache)
        return value, grad

    if cfg is None:
        raise ValueError(f"loss {kind!r} needs an EstimatorConfig for its divergence term")
    coef = 2.0 * sig**2 / n  # per-sample divergence coefficient

    if cfg.divergence_mode == "analytic":
        div = denoiser.analytic_divergence_batch(x)
        value += float(np.mean(coef * div))
        if need_grad:
            grad = denoiser.param_vjp(x, cot_fid.astype(dtype, copy=False), cache)
            grad = grad + (np.mean(coef)) * denoiser.divergence_param_grad(n)
        return value, grad

    eps = np.array([cfg.epsilon_for(s) for s in sig])
    if probes is None:
        probes = cfg.draw_probe(x.shape)
    probes = np.asarray(probes)
    if probes.shape != x.shape:
        raise ValueError(f"probes shape {probes.shape} != batch shape {x.shape}")
    probes = probes.astype(dtype, copy=False)
    x_pert = x + eps[:, None, None, None].astype(dtype) * probes
    out_pert, cache_pert = denoiser.forward_cached(x_pert)
    delta = out_pert - out
    div = np.einsum("bhwc,bhwc->b", probes, delta).astype(np.float64) / eps
    value += float(np.mean(coef * div))
    if need_grad:
        # d/dtheta of the probe term differentiates through both forwards
        c = (coef / (eps * b))[:, None, None, None].astype(dtype)
        grad = denoiser.param_vjp(x_pert, c * probes, cache_pert)
        grad = grad + denoiser.param_vjp(
            x, cot_fid.astype(dtype, copy=False) - c * probes, cache
        )
    return value, grad


def loss_value(kind: str, batch: PatchBatch, denoiser: Denoiser,
               cfg: EstimatorConfig | None = None, probes=None) -> float:
    """Minibatch-mean loss value."""
    value, _ = _loss_core(kind, batch, denoiser, cfg, probes, need_grad=False)
    return value


def loss_gradient(kind: str, batch: PatchBatch, denoiser: Denoiser,
                  cfg: EstimatorConfig | None = None, probes=None) -> np.ndarray:
    """Exact gradient of the minibatch-mean loss w.r.t. the parameters.

    Constant terms (-sigma^2) contribute nothing; the Monte-Carlo
    divergence term is differentiated through both forward passes with one
    probe per sample per call.
    """
    _, grad = _loss_core(kind, batch, denoiser, cfg, probes, need_grad=True)
    return grad


def loss_and_gradient(kind: str, batch: PatchBatch, denoiser: Denoiser,
                      cfg: EstimatorConfig | None = None, probes=None) -> tuple[float, np.ndarray]:
    """Value and gradient in one pass (shared forwards)."""
    return _loss_core(kind, batch, denoiser, cfg, probes, need_grad=True)
