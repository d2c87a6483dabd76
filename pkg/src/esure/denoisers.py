"""The differentiable denoiser zoo.

Every denoiser maps an image to an image of the same shape and exposes

* ``forward``            -- the map itself,
* ``param_vjp``          -- exact reverse-mode parameter gradient
                            ``cotangent^T d(output)/d(theta)``,
* ``analytic_divergence``-- sum_i d(output_i)/d(input_i) where tractable.

The analytically tractable kinds (identity, scaling, conv_filter,
soft_threshold) serve as oracles for the risk-estimator tests; the small
residual CNN is the trainable model and only supports the Monte-Carlo
divergence route.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import cnn
from .images import Image, tensor_from_bytes, tensor_to_bytes
from .rng import RngStream

DENOISER_KINDS = ("identity", "scaling", "conv_filter", "soft_threshold", "small_cnn")

CHECKPOINT_FORMAT = "esure-checkpoint-v1"


class UnsupportedDivergenceError(RuntimeError):
    """No closed-form divergence for this denoiser; use the MC estimate."""


def _unwrap(y) -> tuple[np.ndarray, bool]:
    if isinstance(y, Image):
        return y.data, True
    return np.asarray(y), False


def _rewrap(arr: np.ndarray, was_image: bool):
    return Image(arr) if was_image else arr


def _to_batch(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    """Promote (H,W,C) to (1,H,W,C); reject other ranks."""
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ValueError(f"expected (H,W,C) or (B,H,W,C), got shape {arr.shape}")


class Denoiser:
    """Common plumbing; concrete kinds implement the *_batch internals."""

    kind: str = ""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._theta = np.zeros(0, dtype=self.dtype)

    # -- parameters ----------------------------------------------------------

    @property
    def theta(self) -> np.ndarray:
        return self._theta

    @theta.setter
    def theta(self, value) -> None:
        vec = np.asarray(value, dtype=self.dtype).ravel()
        if vec.shape != self._theta.shape:
            raise ValueError(f"theta length {vec.size} != {self._theta.size}")
        self._theta[...] = vec

    @property
    def param_count(self) -> int:
        return self._theta.size

    def config(self) -> dict:
        return {}

    def clone(self) -> "Denoiser":
        other = build_denoiser(self.kind, self.config() | {"dtype": self.dtype.name})
        other.theta = self._theta.copy()
        return other

    # -- forward / reverse -----------------------------------------------------

    def forward(self, y):
        arr, was_image = _unwrap(y)
        out = self._forward_any(arr.astype(self.dtype, copy=False))
        return _rewrap(out, was_image)

    def forward_cached(self, y: np.ndarray):
        """Batched forward returning (output, cache) for a later param_vjp."""
        return self._forward_any(y.astype(self.dtype, copy=False)), None

    def param_vjp(self, y, cotangent, cache=None) -> np.ndarray:
        y_arr, _ = _unwrap(y)
        u_arr, _ = _unwrap(cotangent)
        if y_arr.shape != u_arr.shape:
            raise ValueError(f"cotangent shape {u_arr.shape} != input shape {y_arr.shape}")
        return self._param_vjp_any(
            y_arr.astype(self.dtype, copy=False),
            u_arr.astype(self.dtype, copy=False),
            cache,
        )

    def analytic_divergence(self, y) -> float:
        arr, _ = _unwrap(y)
        return float(self._divergence_any(arr))

    def analytic_divergence_batch(self, y: np.ndarray) -> np.ndarray:
        """Per-sample divergences for a (B,H,W,C) stack."""
        return np.array([self._divergence_any(y[i]) for i in range(y.shape[0])])

    def divergence_param_grad(self, n: int) -> np.ndarray:
        """d(divergence)/d(theta) for an n-element input (input-independent)."""
        return np.zeros(self.param_count, dtype=self.dtype)

    # -- kind internals --------------------------------------------------------

    def _forward_any(self, arr: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _param_vjp_any(self, y: np.ndarray, u: np.ndarray, cache) -> np.ndarray:
        raise NotImplementedError

    def _divergence_any(self, arr: np.ndarray) -> float:
        raise NotImplementedError


class IdentityDenoiser(Denoiser):
    kind = "identity"

    def _forward_any(self, arr):
        return arr

    def _param_vjp_any(self, y, u, cache):
        return np.zeros(0, dtype=self.dtype)

    def _divergence_any(self, arr):
        return arr.size


class ScalingDenoiser(Denoiser):
    """h(y) = a * y with a single trainable gain a."""

    kind = "scaling"

    def __init__(self, a: float = 1.0, dtype=np.float64):
        super().__init__(dtype)
        self._theta = np.array([a], dtype=self.dtype)

    @property
    def a(self) -> float:
        return float(self._theta[0])

    def _forward_any(self, arr):
        return self._theta[0] * arr

    def _param_vjp_any(self, y, u, cache):
        return np.array([np.sum(u * y)], dtype=self.dtype)

    def _divergence_any(self, arr):
        return self.a * arr.size

    def divergence_param_grad(self, n):
        return np.array([float(n)], dtype=self.dtype)


class ConvFilterDenoiser(Denoiser):
    """One trainable 2-D kernel applied to every channel, zero padded.

    Zero padding makes d(h_i)/d(y_i) equal the center tap at every pixel,
    so the divergence is exactly N * k_center.
    """

    kind = "conv_filter"

    def __init__(self, kernel_size: int = 3, dtype=np.float64):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {kernel_size}")
        super().__init__(dtype)
        self.kernel_size = kernel_size
        kernel = np.zeros((kernel_size, kernel_size), dtype=self.dtype)
        kernel[kernel_size // 2, kernel_size // 2] = 1.0  # centered delta: identity
        self._theta = kernel.ravel()

    def config(self) -> dict:
        return {"kernel_size": self.kernel_size}

    @property
    def kernel(self) -> np.ndarray:
        return self._theta.reshape(self.kernel_size, self.kernel_size)

    @property
    def center_tap(self) -> float:
        return float(self.kernel[self.kernel_size // 2, self.kernel_size // 2])

    def _forward_any(self, arr):
        batch, single = _to_batch(arr)
        out = cnn.depthwise_conv2d_same(batch, self.kernel)
        return out[0] if single else out

    def _param_vjp_any(self, y, u, cache):
        yb, _ = _to_batch(y)
        ub, _ = _to_batch(u)
        grad = cnn.depthwise_conv2d_kernel_vjp(yb, ub, self.kernel.shape)
        return grad.ravel().astype(self.dtype, copy=False)

    def _divergence_any(self, arr):
        return self.center_tap * arr.size

    def divergence_param_grad(self, n):
        grad = np.zeros((self.kernel_size, self.kernel_size), dtype=self.dtype)
        grad[self.kernel_size // 2, self.kernel_size // 2] = float(n)
        return grad.ravel()


class SoftThresholdDenoiser(Denoiser):
    """Elementwise shrinkage h(y)_i = sign(y_i) * max(|y_i| - t, 0).

    Piecewise linear, so the divergence is the count of entries above the
    threshold; this is the weak-sense value and its parameter derivative is
    zero almost everywhere.
    """

    kind = "soft_threshold"

    def __init__(self, threshold: float = 0.1, dtype=np.float64):
        if threshold < 0:
            raise ValueError(f"threshold must be >= 0, got {threshold}")
        super().__init__(dtype)
        self._theta = np.array([threshold], dtype=self.dtype)

    @property
    def threshold(self) -> float:
        return float(self._theta[0])

    def _forward_any(self, arr):
        t = self._theta[0]
        return np.sign(arr) * np.maximum(np.abs(arr) - t, 0)

    def _param_vjp_any(self, y, u, cache):
        active = np.abs(y) > self._theta[0]
        return np.array([-np.sum(u * np.sign(y) * active)], dtype=self.dtype)

    def _divergence_any(self, arr):
        return float(np.count_nonzero(np.abs(arr) > self._theta[0]))

    def analytic_divergence_batch(self, y):
        active = np.abs(y) > self._theta[0]
        return active.sum(axis=(1, 2, 3)).astype(np.float64)


class SmallCnnDenoiser(Denoiser):
    """Residual denoising CNN: output = input - f(input).

    f is a stack of (conv kxk, ReLU) layers ending in a conv back to the
    input channel count.  The final layer is zero-initialized so a freshly
    built network is the exact identity map, which keeps the
    divergence-corrected losses stable early in training.  No batch
    normalization.
    """

    kind = "small_cnn"

    def __init__(
        self,
        layers: int = 7,
        channels: int = 16,
        kernel_size: int = 3,
        in_channels: int = 1,
        dtype=np.float64,
        init_stream: RngStream | None = None,
    ):
        if layers < 2:
            raise ValueError(f"need at least 2 conv layers, got {layers}")
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {kernel_size}")
        if channels < 1 or in_channels < 1:
            raise ValueError("channel counts must be positive")
        super().__init__(dtype)
        self.layers = layers
        self.channels = channels
        self.kernel_size = kernel_size
        self.in_channels = in_channels

        k = kernel_size
        self._shapes: list[tuple[int, int, int, int]] = []
        for layer in range(layers):
            cin = in_channels if layer == 0 else channels
            cout = in_channels if layer == layers - 1 else channels
            self._shapes.append((k, k, cin, cout))
        total = sum(kh * kw * cin * cout + cout for (kh, kw, cin, cout) in self._shapes)
        self._theta = np.zeros(total, dtype=self.dtype)
        self._rebuild_views()
        if init_stream is not None:
            self._initialize(init_stream)

    def _rebuild_views(self) -> None:
        self._views: list[tuple[np.ndarray, np.ndarray]] = []
        offset = 0
        for (kh, kw, cin, cout) in self._shapes:
            wn = kh * kw * cin * cout
            wview = self._theta[offset : offset + wn].reshape(kh, kw, cin, cout)
            offset += wn
            bview = self._theta[offset : offset + cout]
            offset += cout
            self._views.append((wview, bview))

    def _initialize(self, stream: RngStream) -> None:
        # He init on hidden layers, zeros on the last so f(y) = 0 initially.
        for layer, (wview, bview) in enumerate(self._views[:-1]):
            fan_in = wview.shape[0] * wview.shape[1] * wview.shape[2]
            std = np.sqrt(2.0 / fan_in)
            wview[...] = (stream.child("w", layer).standard_normal(wview.shape) * std).astype(self.dtype)
            bview[...] = 0.0
        w_last, b_last = self._views[-1]
        w_last[...] = 0.0
        b_last[...] = 0.0

    def config(self) -> dict:
        return {
            "layers": self.layers,
            "channels": self.channels,
            "kernel_size": self.kernel_size,
            "in_channels": self.in_channels,
        }

    def _forward_batch(self, x: np.ndarray, keep_cache: bool):
        inputs = [x]
        masks = []
        cur = x
        for wview, bview in self._views[:-1]:
            z = cnn.conv2d_same(cur, wview, bview)
            if keep_cache:
                masks.append(z > 0)
            cur = np.maximum(z, 0)
            if keep_cache:
                inputs.append(cur)
        w_last, b_last = self._views[-1]
        out = x - cnn.conv2d_same(cur, w_last, b_last)
        return out, ((inputs, masks) if keep_cache else None)

    def forward_cached(self, y: np.ndarray):
        return self._forward_batch(y.astype(self.dtype, copy=False), keep_cache=True)

    def _forward_any(self, arr):
        batch, single = _to_batch(arr)
        out, _ = self._forward_batch(batch, keep_cache=False)
        return out[0] if single else out

    def _param_vjp_any(self, y, u, cache):
        yb, single = _to_batch(y)
        ub, _ = _to_batch(u)
        if cache is None:
            _, cache = self._forward_batch(yb, keep_cache=True)
        inputs, masks = cache
        g = -ub  # residual branch enters with a minus sign
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.layers
        for layer in range(self.layers - 1, -1, -1):
            wview, _ = self._views[layer]
            dw, db = cnn.conv2d_param_vjp(inputs[layer], g, self._shapes[layer])
            grads[layer] = (dw, db)
            if layer > 0:
                g = cnn.conv2d_input_vjp(g, wview) * masks[layer - 1]
        flat = np.empty_like(self._theta)
        offset = 0
        for dw, db in grads:
            flat[offset : offset + dw.size] = dw.ravel()
            offset += dw.size
            flat[offset : offset + db.size] = db.ravel()
            offset += db.size
        return flat

    def _divergence_any(self, arr):
        raise UnsupportedDivergenceError(
            "no closed-form divergence for small_cnn; use the Monte-Carlo estimate"
        )

    def analytic_divergence_batch(self, y):
        raise UnsupportedDivergenceError(
            "no closed-form divergence for small_cnn; use the Monte-Carlo estimate"
        )


_DTYPES = {"float64": np.float64, "float32": np.float32}


def build_denoiser(kind: str, config: dict | None = None, init_stream: RngStream | None = None) -> Denoiser:
    """Construct a denoiser of the given kind from a config dict.

    Defaults follow the identity-start convention: scaling gain 1, centered
    delta kernel, zero-initialized final CNN layer.
    """
    cfg = dict(config or {})
    dtype_name = cfg.pop("dtype", "float64")
    if dtype_name not in _DTYPES:
        raise ValueError(f"unknown dtype {dtype_name!r} (use float32 or float64)")
    dtype = _DTYPES[dtype_name]
    try:
        if kind == "identity":
            d = IdentityDenoiser(dtype=dtype, **cfg)
        elif kind == "scaling":
            d = ScalingDenoiser(dtype=dtype, **cfg)
        elif kind == "conv_filter":
            d = ConvFilterDenoiser(dtype=dtype, **cfg)
        elif kind == "soft_threshold":
            d = SoftThresholdDenoiser(dtype=dtype, **cfg)
        elif kind == "small_cnn":
            d = SmallCnnDenoiser(dtype=dtype, init_stream=init_stream, **cfg)
        else:
            raise ValueError(f"unknown denoiser kind {kind!r}")
    except TypeError as exc:
        raise ValueError(f"invalid config for {kind}: {exc}") from None
    return d


# ---------------------------------------------------------------------------
# Checkpoints: JSON header (kind, architecture, config digest) + f32 tensor


def save_checkpoint(denoiser: Denoiser, path, training_config_digest: str = "", extra: dict | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "kind": denoiser.kind,
        "config": denoiser.config(),
        "dtype": denoiser.dtype.name,
        "param_count": denoiser.param_count,
        "training_config_digest": training_config_digest,
    }
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = tensor_to_bytes(denoiser.theta.reshape(1, 1, max(denoiser.param_count, 1))
                              if denoiser.param_count else np.zeros((1, 1, 1)))
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    """Rebuild a denoiser from a checkpoint; returns (denoiser, header).

    Parameters are stored as float32 in the container; they are cast back to
    the denoiser's configured dtype on load.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError("checkpoint shorter than header length field")
    (hlen,) = struct.unpack_from("<I", raw)
    try:
        header = json.loads(raw[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed checkpoint header: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    tensor = tensor_from_bytes(raw[4 + hlen :])
    denoiser = build_denoiser(header["kind"], header["config"] | {"dtype": header["dtype"]})
    if denoiser.param_count:
        denoiser.theta = tensor.data.ravel()[: denoiser.param_count]
    return denoiser, header
