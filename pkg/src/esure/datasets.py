"""Desk-scale corpora and dataset manifests.

The bundled corpus is synthetic: piecewise-smooth textures (low-pass noise,
gratings, and hard-edged shapes) that give a denoiser real structure to
learn.  A directory of PGM files can be substituted for any corpus.

Manifests are JSON files listing materialized tensor files per sample so
the ``synth`` CLI output can be consumed by ``train`` and ``eval``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .images import Image, read_pgm, read_tensor, write_tensor
from .pairing import (
    PairedSample,
    TOTAL_SIGMA_MODE,
    corollary_transform,
    make_imperfect_gt_pair,
    make_single,
    make_uncorrelated_pair,
)
from .rng import RngStream

MANIFEST_SCHEMA = "esure-manifest-v1"

REGIMES = ("single", "uncorrelated_pair", "imperfect_gt")


# ---------------------------------------------------------------------------
# Synthetic textures


def _lowpass_noise(stream: RngStream, h: int, w: int, cutoff: float) -> np.ndarray:
    """Unit-variance smooth random field via an FFT radial low-pass."""
    white = stream.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    radius = np.sqrt(fy**2 + fx**2)
    mask = np.exp(-((radius * max(h, w) / cutoff) ** 2))
    smooth = np.fft.irfft2(np.fft.rfft2(white) * mask, s=(h, w))
    std = smooth.std()
    return smooth / (std if std > 0 else 1.0)


def synthetic_texture(stream: RngStream, height: int, width: int) -> Image:
    """One grayscale texture: smooth base + gratings + hard-edged shapes."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = _lowpass_noise(stream.child("base"), height, width,
                          cutoff=float(stream.child("cutoff").uniform(2.5, 6.0)))
    img = 0.22 * base

    n_gratings = int(stream.child("ngrat").integers(1, 4))
    for g in range(n_gratings):
        sub = stream.child("grating", g)
        freq = float(sub.uniform(2.0, 12.0)) * 2.0 * math.pi / max(height, width)
        angle = float(sub.uniform(0.0, math.pi))
        phase = float(sub.uniform(0.0, 2.0 * math.pi))
        amp = float(sub.uniform(0.04, 0.12))
        img += amp * np.sin(freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)

    n_shapes = int(stream.child("nshapes").integers(3, 8))
    for s in range(n_shapes):
        sub = stream.child("shape", s)
        cy = float(sub.uniform(0.1, 0.9)) * height
        cx = float(sub.uniform(0.1, 0.9)) * width
        size = float(sub.uniform(0.08, 0.3)) * min(height, width)
        amp = float(sub.uniform(-0.3, 0.3))
        if int(sub.integers(0, 2)) == 0:
            mask = (np.abs(yy - cy) < size / 2) & (np.abs(xx - cx) < size / 2)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < (size / 2) ** 2
        img = img + amp * mask

    # affine rescale into [0.08, 0.92] without clipping
    centered = img - img.mean()
    peak = np.max(np.abs(centered))
    if peak > 0:
        centered = centered * (0.42 / peak)
    return Image((0.5 + centered)[:, :, None])


def synthetic_corpus(seed: int, count: int, size: int, purpose: str = "train") -> list[Image]:
    """Deterministic list of textures; disjoint across purposes."""
    stream = RngStream(seed, "corpus", purpose)
    return [synthetic_texture(stream.child(i), size, size) for i in range(count)]


def load_clean_dir(path) -> list[Image]:
    """Load all PGM and tensor files from a directory, sorted by name."""
    root = Path(path)
    images = []
    for p in sorted(root.iterdir()):
        if p.suffix == ".pgm":
            images.append(read_pgm(p))
        elif p.suffix == ".esdn":
            images.append(read_tensor(p))
    if not images:
        raise FileNotFoundError(f"no .pgm or .esdn images under {root}")
    return images


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class ManifestItem:
    clean: str
    input: str
    target: str
    sigma_input_255: float
    sigma_target_255: float
    mode: str


@dataclass
class Manifest:
    regime: str
    sigma_noisy_255: float
    sigma_gt_255: float
    seed: int
    sigma_mode: str = TOTAL_SIGMA_MODE
    items: list[ManifestItem] = field(default_factory=list)
    schema: str = MANIFEST_SCHEMA

    def write(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")


def read_manifest(path) -> Manifest:
    with open(path) as f:
        raw = json.load(f)
    if raw.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unsupported manifest schema {raw.get('schema')!r}")
    items = [ManifestItem(**item) for item in raw.pop("items")]
    raw.pop("schema")
    return Manifest(items=items, **raw)


def synthesize_samples(
    cleans: list[Image],
    regime: str,
    sigma_noisy_255: float,
    seed: int,
    sigma_gt_255: float = 0.0,
    sigma_mode: str = TOTAL_SIGMA_MODE,
    use_corollary: bool = False,
) -> list[PairedSample]:
    """Deterministic noisy samples for one regime.

    Noise streams are keyed by image index only, so sweeps over sigma values
    reuse the same underlying standard-normal fields (common random numbers).
    With ``use_corollary`` an uncorrelated pair is averaged into a nested
    (less-noisy-target, re-noised-input) pair.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r} (expected one of {REGIMES})")
    sigma = sigma_noisy_255 / 255.0
    sigma_gt = sigma_gt_255 / 255.0
    samples = []
    for i, clean in enumerate(cleans):
        stream = RngStream(seed, "train-noise", i)
        if regime == "single":
            samples.append(make_single(clean, sigma, stream))
        elif regime == "uncorrelated_pair":
            pair = make_uncorrelated_pair(clean, sigma, stream)
            if use_corollary:
                pair = corollary_transform(pair, stream)
            samples.append(pair)
        else:
            samples.append(
                make_imperfect_gt_pair(clean, sigma_gt, sigma, stream, sigma_mode=sigma_mode)
            )
    return samples


def materialize(
    cleans: list[Image],
    regime: str,
    sigma_noisy_255: float,
    seed: int,
    out_dir,
    sigma_gt_255: float = 0.0,
    sigma_mode: str = TOTAL_SIGMA_MODE,
) -> Manifest:
    """Write clean/input/target tensors plus the manifest under ``out_dir``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    samples = synthesize_samples(
        cleans, regime, sigma_noisy_255, seed,
        sigma_gt_255=sigma_gt_255, sigma_mode=sigma_mode,
    )
    manifest = Manifest(
        regime=regime, sigma_noisy_255=sigma_noisy_255,
        sigma_gt_255=sigma_gt_255, seed=seed, sigma_mode=sigma_mode,
    )
    for i, sample in enumerate(samples):
        names = {
            "clean": f"img{i:03d}_clean.esdn",
            "input": f"img{i:03d}_input.esdn",
            "target": f"img{i:03d}_target.esdn",
        }
        write_tensor(root / names["clean"], sample.clean)
        write_tensor(root / names["input"], sample.input)
        write_tensor(root / names["target"], sample.target)
        manifest.items.append(
            ManifestItem(
                clean=names["clean"],
                input=names["input"],
                target=names["target"],
                sigma_input_255=sample.sigma_input * 255.0,
                sigma_target_255=sample.sigma_target * 255.0,
                mode=sample.mode,
            )
        )
    manifest.write(root / "manifest.json")
    return manifest


def load_samples(manifest: Manifest, root) -> list[PairedSample]:
    """Reload materialized samples; tensors round-trip bit-exactly as f32."""
    base = Path(root)
    samples = []
    for item in manifest.items:
        samples.append(
            PairedSample(
                input=read_tensor(base / item.input),
                target=read_tensor(base / item.target),
                sigma_input=item.sigma_input_255 / 255.0,
                sigma_target=item.sigma_target_255 / 255.0,
                mode=item.mode,
                clean=read_tensor(base / item.clean),
            )
        )
    return samples
