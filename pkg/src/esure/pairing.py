"""Noisy training-pair synthesis and patch extraction.

Three regimes are supported:

* single realization per clean image (the classic one-noisy-copy setting),
* two independent realizations per image (input and target noise drawn
  from disjoint stream purposes),
* nested pairs, where the input is the target plus extra noise.  This is
  the imperfect-ground-truth setting: the target itself carries mild noise
  and the input's noise strictly contains it.

The averaging transform converts an independent pair (y_a, y_b) into a
nested pair: target w = (y_a + y_b)/2 at sigma/sqrt(2), input v = w + z
with fresh z at sigma^2/2, so v is again a full-sigma realization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .images import Image, gaussian_field
from .rng import RngStream

PairMode = Literal["clean_target", "independent_target", "nested_target"]
_MODES = ("clean_target", "independent_target", "nested_target")

# Input noise std is sigma_noisy overall; the added component is derived.
TOTAL_SIGMA_MODE = "total_sigma"
# Added noise std is sigma_noisy itself; input ends up noisier than nominal.
ADDED_SIGMA_MODE = "added_sigma"


@dataclass(frozen=True)
class PairedSample:
    """One (input, target) training sample plus its noise bookkeeping.

    ``input`` is fed to the denoiser; ``target`` is what the loss compares
    against.  ``clean`` is the noiseless oracle, carried only for evaluation
    and for the supervised MSE reference, never consumed by the unsupervised
    losses.
    """

    input: Image
    target: Image
    sigma_input: float
    sigma_target: float
    mode: PairMode
    clean: Image | None = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown pair mode {self.mode!r}")
        if self.input.shape != self.target.shape:
            raise ValueError(
                f"input/target shape mismatch: {self.input.shape} vs {self.target.shape}"
            )
        if self.clean is not None and self.clean.shape != self.input.shape:
            raise ValueError("clean oracle shape mismatch")
        if self.sigma_input < 0 or self.sigma_target < 0:
            raise ValueError("sigma values must be >= 0")
        if self.mode == "nested_target" and self.sigma_input < self.sigma_target:
            raise ValueError(
                "nested pairs need sigma_input >= sigma_target "
                f"(got {self.sigma_input} < {self.sigma_target})"
            )


def synth_noisy(clean: Image, sigma: float, stream: RngStream) -> Image:
    """clean + i.i.d. Gaussian noise at std ``sigma``."""
    noise = gaussian_field(stream, clean.shape, sigma)
    return Image(clean.data + noise.data)


def make_single(clean: Image, sigma: float, stream: RngStream) -> PairedSample:
    """Single noisy realization; the target slot holds the clean oracle.

    Uses the same stream purpose as the first member of
    ``make_uncorrelated_pair`` so single and pair regimes built from one
    parent stream share that realization (common random numbers).
    """
    noisy = synth_noisy(clean, sigma, stream.child("realization", 0))
    return PairedSample(
        input=noisy, target=clean, sigma_input=sigma, sigma_target=0.0,
        mode="clean_target", clean=clean,
    )


def make_uncorrelated_pair(clean: Image, sigma: float, stream: RngStream) -> PairedSample:
    """Two independent realizations of the same clean image at equal sigma."""
    noisy_a = synth_noisy(clean, sigma, stream.child("realization", 0))
    noisy_b = synth_noisy(clean, sigma, stream.child("realization", 1))
    return PairedSample(
        input=noisy_a, target=noisy_b, sigma_input=sigma, sigma_target=sigma,
        mode="independent_target", clean=clean,
    )


def corollary_transform(pair: PairedSample, stream: RngStream) -> PairedSample:
    """Average an independent pair into a less-noisy target, re-noise the input.

    Given (y_a, y_b) both at sigma, the target becomes w = (y_a + y_b)/2
    with noise std sigma/sqrt(2), and the input v = w + z with fresh
    z ~ N(0, sigma^2/2 I), so v is a full-sigma realization again.  The
    result is a nested pair suitable for the divergence-corrected loss.
    """
    if pair.mode != "independent_target":
        raise ValueError(f"averaging transform needs an independent pair, got {pair.mode!r}")
    if not math.isclose(pair.sigma_input, pair.sigma_target, rel_tol=0, abs_tol=1e-12):
        raise ValueError("averaging transform needs equal member sigmas")
    sigma = pair.sigma_input
    w = Image(0.5 * (pair.input.data + pair.target.data))
    z = gaussian_field(stream.child("renoise"), w.shape, sigma / math.sqrt(2.0))
    v = Image(w.data + z.data)
    return PairedSample(
        input=v, target=w, sigma_input=sigma, sigma_target=sigma / math.sqrt(2.0),
        mode="nested_target", clean=pair.clean,
    )


def make_imperfect_gt_pair(
    clean: Image,
    sigma_gt: float,
    sigma_noisy: float,
    stream: RngStream,
    sigma_mode: str = TOTAL_SIGMA_MODE,
) -> PairedSample:
    """Nested pair from an imperfect (mildly noisy) ground truth.

    Target y1 = clean + noise at sigma_gt; input y2 = y1 + z.  In
    ``total_sigma`` mode (default) z has std sqrt(sigma_noisy^2 - sigma_gt^2)
    so the input's total noise level is exactly sigma_noisy, keeping columns
    comparable across sigma_gt values.  In ``added_sigma`` mode z has std
    sigma_noisy itself.
    """
    if sigma_gt < 0:
        raise ValueError(f"sigma_gt must be >= 0, got {sigma_gt}")
    if sigma_noisy <= sigma_gt:
        raise ValueError(
            f"sigma_noisy must exceed sigma_gt (got {sigma_noisy} <= {sigma_gt}): "
            "the nested construction requires strictly added noise"
        )
    if sigma_mode == TOTAL_SIGMA_MODE:
        sigma_z = math.sqrt(sigma_noisy**2 - sigma_gt**2)
        sigma_total = sigma_noisy
    elif sigma_mode == ADDED_SIGMA_MODE:
        sigma_z = sigma_noisy
        sigma_total = math.sqrt(sigma_gt**2 + sigma_noisy**2)
    else:
        raise ValueError(f"unknown sigma mode {sigma_mode!r}")
    target = synth_noisy(clean, sigma_gt, stream.child("gt-noise"))
    z = gaussian_field(stream.child("extra-noise"), clean.shape, sigma_z)
    noisy = Image(target.data + z.data)
    return PairedSample(
        input=noisy, target=target, sigma_input=sigma_total, sigma_target=sigma_gt,
        mode="nested_target", clean=clean,
    )


# ---------------------------------------------------------------------------
# Patch extraction

_DIHEDRAL_COUNT = 8


def _dihedral(arr: np.ndarray, transform: int) -> np.ndarray:
    """One of the 8 square symmetries: rot90 x (t % 4), then flip if t >= 4."""
    out = np.rot90(arr, k=transform % 4, axes=(0, 1))
    if transform >= 4:
        out = np.flip(out, axis=1)
    return np.ascontiguousarray(out)


@dataclass
class PatchBatch:
    """Uniform square patches stacked for minibatch use.

    ``sigma_input``/``sigma_target`` are per patch so blind training (one
    sigma drawn per patch) uses the same carrier as fixed-sigma training.
    """

    inputs: np.ndarray  # (P, k, k, C)
    targets: np.ndarray  # (P, k, k, C)
    sigma_input: np.ndarray  # (P,)
    sigma_target: np.ndarray  # (P,)
    mode: PairMode
    cleans: np.ndarray | None = None  # (P, k, k, C) oracle, if available

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.inputs.shape[1] != self.inputs.shape[2]:
            raise ValueError(f"patches must be square (P, k, k, C), got {self.inputs.shape}")
        if self.inputs.shape != self.targets.shape:
            raise ValueError("input/target patch shape mismatch")
        if len(self.inputs) < 1:
            raise ValueError("patch batch must contain at least one patch")
        if self.mode not in _MODES:
            raise ValueError(f"unknown pair mode {self.mode!r}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def patch_size(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "PatchBatch":
        idx = np.asarray(indices)
        return PatchBatch(
            inputs=self.inputs[idx],
            targets=self.targets[idx],
            sigma_input=self.sigma_input[idx],
            sigma_target=self.sigma_target[idx],
            mode=self.mode,
            cleans=None if self.cleans is None else self.cleans[idx],
        )

    def sample(self, i: int) -> PairedSample:
        return PairedSample(
            input=Image(self.inputs[i]),
            target=Image(self.targets[i]),
            sigma_input=float(self.sigma_input[i]),
            sigma_target=float(self.sigma_target[i]),
            mode=self.mode,
            clean=None if self.cleans is None else Image(self.cleans[i]),
        )


def _grid_positions(extent: int, patch: int, stride: int) -> range:
    return range(0, extent - patch + 1, stride)


def extract_patches(
    samples: list[PairedSample],
    patch_size: int,
    stride: int,
    augment: bool = False,
    stream: RngStream | None = None,
) -> PatchBatch:
    """Regular-grid square crops applied identically to input and target.

    With ``augment`` each patch gets one of the 8 dihedral transforms,
    drawn from ``stream`` and applied to input, target, and clean alike.
    Patch order is deterministic: samples in list order, positions row-major.
    """
    if not samples:
        raise ValueError("no samples to extract patches from")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if augment and stream is None:
        raise ValueError("augmentation requires an RngStream")
    mode = samples[0].mode
    have_clean = all(s.clean is not None for s in samples)

    inputs, targets, cleans, sig_in, sig_tg = [], [], [], [], []
    for sample in samples:
        if sample.mode != mode:
            raise ValueError("all samples in one batch must share a pair mode")
        h, w, _ = sample.input.shape
        if patch_size > min(h, w):
            raise ValueError(f"patch size {patch_size} exceeds image extent {h}x{w}")
        for top in _grid_positions(h, patch_size, stride):
            for left in _grid_positions(w, patch_size, stride):
                sl = (slice(top, top + patch_size), slice(left, left + patch_size))
                pin = sample.input.data[sl]
                ptg = sample.target.data[sl]
                pcl = sample.clean.data[sl] if have_clean else None
                if augment:
                    t = int(stream.integers(0, _DIHEDRAL_COUNT))
                    pin = _dihedral(pin, t)
                    ptg = _dihedral(ptg, t)
                    if pcl is not None:
                        pcl = _dihedral(pcl, t)
                inputs.append(pin)
                targets.append(ptg)
                if pcl is not None:
                    cleans.append(pcl)
                sig_in.append(sample.sigma_input)
                sig_tg.append(sample.sigma_target)

    return PatchBatch(
        inputs=np.ascontiguousarray(inputs),
        targets=np.ascontiguousarray(targets),
        sigma_input=np.asarray(sig_in, dtype=np.float64),
        sigma_target=np.asarray(sig_tg, dtype=np.float64),
        mode=mode,
        cleans=np.ascontiguousarray(cleans) if have_clean else None,
    )


def blind_patch_batch(
    cleans: list[Image],
    regime: str,
    sigma_lo: float,
    sigma_hi: float,
    patch_size: int,
    stride: int,
    stream: RngStream,
    augment: bool = False,
    sigma_gt: float = 0.0,
) -> PatchBatch:
    """Patches with one noise level drawn uniformly per patch.

    Clean patches are extracted first, then each patch is noised at its own
    sigma according to ``regime`` (single | uncorrelated_pair | imperfect_gt).
    For the imperfect regime the draw range is clamped above sigma_gt.
    """
    if not 0 <= sigma_lo <= sigma_hi:
        raise ValueError(f"invalid sigma range [{sigma_lo}, {sigma_hi}]")
    base = [
        PairedSample(input=c, target=c, sigma_input=0.0, sigma_target=0.0,
                     mode="clean_target", clean=c)
        for c in cleans
    ]
    grid = extract_patches(base, patch_size, stride, augment=augment,
                           stream=stream.child("patches") if augment else None)
    sigmas = stream.child("sigma").uniform(sigma_lo, sigma_hi, (len(grid),))
    samples = []
    for i in range(len(grid)):
        clean_patch = Image(grid.cleans[i])
        sub = stream.child("noise", i)
        sigma = float(sigmas[i])
        if regime == "single":
            samples.append(make_single(clean_patch, sigma, sub))
        elif regime == "uncorrelated_pair":
            samples.append(make_uncorrelated_pair(clean_patch, sigma, sub))
        elif regime == "imperfect_gt":
            sigma = max(sigma, np.nextafter(sigma_gt, np.inf))
            samples.append(make_imperfect_gt_pair(clean_patch, sigma_gt, sigma, sub))
        else:
            raise ValueError(f"unknown regime {regime!r}")
    return PatchBatch(
        inputs=np.ascontiguousarray([s.input.data for s in samples]),
        targets=np.ascontiguousarray([s.target.data for s in samples]),
        sigma_input=np.asarray([s.sigma_input for s in samples]),
        sigma_target=np.asarray([s.sigma_target for s in samples]),
        mode=samples[0].mode,
        cleans=np.ascontiguousarray([s.clean.data for s in samples]),
    )
