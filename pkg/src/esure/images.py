"""Image values, Gaussian noise fields, PSNR, and the two file formats.

Intensities live in normalized units: the nominal range is [0, 1] and noise
levels quoted in the historical 0-255 convention are divided by 255 on the
way in.  Noisy images are never clipped to [0, 1]; clipping would destroy
Gaussianity, so it happens only at 8-bit export.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .rng import RngStream

PSNR_CAP_DB = 120.0

TENSOR_MAGIC = b"ESDN"
TENSOR_VERSION = 1
# Guard against absurd dimensions from corrupt headers.
MAX_TENSOR_ELEMENTS = 2**31


class FormatError(ValueError):
    """Malformed or unsupported image container content."""


NoiseRole = Literal["single", "pair_member", "ground_truth", "synthetic_added"]
_NOISE_ROLES = ("single", "pair_member", "ground_truth", "synthetic_added")


@dataclass(frozen=True)
class NoiseSpec:
    """Description of one i.i.d. Gaussian noise component.

    ``sigma`` is in normalized intensity units (a 0-255 level divided by
    255).  Identical (sigma, seed, shape) always reproduces bit-identical
    noise fields.
    """

    sigma: float
    seed: int
    role: NoiseRole = "single"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.role not in _NOISE_ROLES:
            raise ValueError(f"unknown noise role {self.role!r}")


@dataclass(frozen=True)
class Image:
    """Dense real-valued grid stored row-major as (H, W, C) float64.

    All values must be finite; any operation in this package preserves that.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image data must be (H, W, C), got shape {self.data.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"image dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def n(self) -> int:
        """Total number of scalar entries H*W*C."""
        return self.data.size

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 1) -> "Image":
        return cls(np.zeros((height, width, channels)))

    @classmethod
    def full(cls, height: int, width: int, value: float, channels: int = 1) -> "Image":
        return cls(np.full((height, width, channels), float(value)))


def as_array(image) -> np.ndarray:
    """Coerce an Image or array-like to a float (H, W, C) ndarray."""
    if isinstance(image, Image):
        return image.data
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :, None]
    elif arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"cannot interpret shape {np.shape(image)} as an image")
    return arr


def gaussian_field(stream: RngStream, shape: tuple[int, int, int], sigma: float) -> Image:
    """I.i.d. zero-mean Gaussian field with standard deviation ``sigma``.

    Deterministic given the stream state; sigma = 0 yields an exact zero
    field while still advancing the stream uniformly.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    h, w, c = shape
    if h < 1 or w < 1 or c < 1:
        raise ValueError(f"field shape must be positive, got {shape}")
    field = stream.standard_normal((h, w, c))
    return Image(field * sigma)


def psnr(reference, estimate, peak: float = 1.0, cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio 10*log10(peak^2 / MSE) in dB.

    An exactly-zero difference reports the configured cap (default 120 dB)
    so downstream CSVs stay numeric.
    """
    ref = as_array(reference)
    est = as_array(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {est.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return cap_db
    return 10.0 * np.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255) interchange


def write_pgm(image, path) -> None:
    """Write a single-channel image as binary PGM (P5, maxval 255).

    Values are clamped to [0, 1] and quantized round-half-up to 8 bits.
    """
    arr = as_array(image)
    if arr.shape[2] != 1:
        raise ValueError(f"pgm supports single-channel images, got C={arr.shape[2]}")
    clamped = np.clip(arr[:, :, 0], 0.0, 1.0)
    # round-half-up: np.round would round halves to even
    q = np.floor(clamped * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def _read_pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read whitespace/comment-separated header tokens; returns (tokens, offset)."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise FormatError("truncated pgm header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    # exactly one whitespace byte separates the header from the payload
    if i >= len(data) or not data[i : i + 1].isspace():
        raise FormatError("missing separator after pgm header")
    return tokens, i + 1


def read_pgm(path) -> Image:
    """Read a binary PGM (P5, maxval 255) into normalized [0, 1] values."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _read_pnm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary pgm (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise FormatError(f"malformed pgm header: {exc}") from None
    if w < 1 or h < 1:
        raise FormatError(f"non-positive pgm dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"pgm maxval must be 255, got {maxval}")
    if h * w > MAX_TENSOR_ELEMENTS:
        raise FormatError(f"pgm dimensions overflow: {w}x{h}")
    payload = data[offset : offset + h * w]
    if len(payload) != h * w:
        raise FormatError(f"pgm payload has {len(payload)} bytes, expected {h * w}")
    q = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return Image(q.astype(np.float64)[:, :, None] / 255.0)


# ---------------------------------------------------------------------------
# Raw float32 tensor container ("ESDN"): lossless interchange for any shape

_HEADER = struct.Struct("<4sHIII")  # magic, version, H, W, C


def tensor_to_bytes(array) -> bytes:
    arr = as_array(array)
    h, w, c = arr.shape
    if arr.size > MAX_TENSOR_ELEMENTS:
        raise FormatError(f"tensor dimensions overflow: {arr.shape}")
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, h, w, c)
    return header + arr.astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> Image:
    if len(buf) < _HEADER.size:
        raise FormatError("tensor container shorter than header")
    magic, version, h, w, c = _HEADER.unpack_from(buf)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if h < 1 or w < 1 or c < 1 or h * w * c > MAX_TENSOR_ELEMENTS:
        raise FormatError(f"tensor dimensions invalid: {h}x{w}x{c}")
    expected = _HEADER.size + h * w * c * 4
    if len(buf) != expected:
        raise FormatError(f"tensor payload has {len(buf)} bytes, expected {expected}")
    flat = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    return Image(flat.astype(np.float64).reshape(h, w, c))


def write_tensor(path, array) -> None:
    """Write the binary float32 tensor container (bit-exact for f32 data)."""
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(array))


def read_tensor(path) -> Image:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())
