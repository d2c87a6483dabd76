"""Minibatch training of a denoiser under any of the four losses.

Runs are bit-deterministic given (config, data): patch extraction, epoch
shuffles, and per-step probe draws all derive from the config seed, and the
parameter update order is fixed.  The learning rate starts at
``lr_initial`` and is multiplied by ``lr_drop_factor`` from
``lr_drop_epoch`` onward.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .denoisers import Denoiser, build_denoiser
from .images import psnr
from .losses import (
    DEFAULT_KAPPA,
    EstimatorConfig,
    LOSS_KINDS,
    epsilon_rule,
    loss_and_gradient,
)
from .pairing import PairedSample, PatchBatch, extract_patches
from .rng import RngStream

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingLog",
    "TrainingDivergedError",
    "IncompatibleRegimeError",
    "adam_step",
    "epsilon_rule",
    "init_adam_state",
    "train",
]


class TrainingDivergedError(RuntimeError):
    """The running loss left the finite range; training aborted."""


class IncompatibleRegimeError(ValueError):
    """Dataset regime does not match the requested loss kind."""


_LOSS_REGIMES = {
    "mse": ("clean_target",),
    "sure": ("clean_target",),  # single noisy realizations, oracle in the target slot
    "n2n": ("independent_target", "nested_target"),
    "esure": ("independent_target", "nested_target"),
}


@dataclass
class TrainConfig:
    loss_kind: str
    epochs: int = 50
    batch_size: int = 32
    lr_initial: float = 1e-3
    lr_drop_factor: float = 0.1
    lr_drop_epoch: int = 40
    divergence_mode: str = "monte_carlo"
    kappa: float = DEFAULT_KAPPA  # probe step per unit sigma (0-255 convention)
    epsilon: float | None = None  # fixed probe step override
    patch_size: int = 40
    stride: int = 24
    augment: bool = True
    sigma_range_255: tuple[float, float] | None = None  # blind-mode bookkeeping
    seed: int = 0
    precision: str = "float64"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    val_interval: int = 0  # 0 disables validation PSNR

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr_initial <= 0:
            raise ValueError(f"lr_initial must be > 0, got {self.lr_initial}")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    def digest(self) -> str:
        """Short stable hash of the full configuration."""
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    def estimator_config(self, probe_stream: RngStream | None = None) -> EstimatorConfig:
        return EstimatorConfig(
            divergence_mode=self.divergence_mode,
            epsilon=self.epsilon,
            kappa=self.kappa,
            probe_stream=probe_stream,
        )


@dataclass
class AdamState:
    """First/second moment accumulators aligned with the parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


def init_adam_state(param_count: int, dtype=np.float64) -> AdamState:
    return AdamState(m=np.zeros(param_count, dtype=dtype), v=np.zeros(param_count, dtype=dtype))


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected adaptive-moment update; pure, returns new values."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError(
            f"length mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, step=t)


@dataclass
class TrainingLog:
    """Per-epoch log rows plus a commented CSV header with the run setup."""

    header: dict
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("epoch", "step", "lr", "mean_loss", "val_psnr", "wall_ms")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            for key, value in self.header.items():
                f.write(f"# {key}={value}\n")
            writer = csv.DictWriter(f, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row.get(k, "") for k in self.COLUMNS})


def _learning_rate(config: TrainConfig, epoch: int) -> float:
    if epoch >= config.lr_drop_epoch:
        return config.lr_initial * config.lr_drop_factor
    return config.lr_initial


def _with_precision(denoiser: Denoiser, precision: str) -> Denoiser:
    if denoiser.dtype == np.dtype(precision):
        return denoiser.clone()
    fresh = build_denoiser(denoiser.kind, denoiser.config() | {"dtype": precision})
    if fresh.param_count:
        fresh.theta = denoiser.theta.astype(fresh.dtype)
    return fresh


def _validation_psnr(denoiser: Denoiser, val_data: list[PairedSample]) -> float:
    values = []
    for sample in val_data:
        if sample.clean is None:
            raise ValueError("validation samples need clean oracles")
        estimate = denoiser.forward(sample.input.data[None])[0]
        values.append(psnr(sample.clean.data, estimate))
    return float(np.mean(values))


def train(
    config: TrainConfig,
    data: list[PairedSample] | PatchBatch,
    denoiser: Denoiser,
    val_data: list[PairedSample] | None = None,
) -> tuple[Denoiser, TrainingLog]:
    """Train a copy of ``denoiser`` on ``data``; the input object is untouched.

    ``data`` is either full-size paired samples (patches are extracted here,
    deterministically) or a ready-made PatchBatch, e.g. from the blind
    per-patch-sigma synthesis path.
    """
    if isinstance(data, PatchBatch):
        patches = data
    else:
        patches = extract_patches(
            data,
            config.patch_size,
            config.stride,
            augment=config.augment,
            stream=RngStream(config.seed, "patches"),
        )
    if patches.mode not in _LOSS_REGIMES[config.loss_kind]:
        raise IncompatibleRegimeError(
            f"loss {config.loss_kind!r} cannot train on {patches.mode!r} samples"
        )

    model = _with_precision(denoiser, config.precision)
    # Cast once; minibatch views then avoid per-step conversions.
    patches = PatchBatch(
        inputs=patches.inputs.astype(model.dtype, copy=False),
        targets=patches.targets.astype(model.dtype, copy=False),
        sigma_input=patches.sigma_input,
        sigma_target=patches.sigma_target,
        mode=patches.mode,
        cleans=None if patches.cleans is None else patches.cleans.astype(model.dtype, copy=False),
    )

    state = init_adam_state(model.param_count, dtype=model.dtype)
    log = TrainingLog(
        header={
            "config_digest": config.digest(),
            "loss": config.loss_kind,
            "precision": config.precision,
            "adam": f"beta1={config.beta1},beta2={config.beta2},eps={config.adam_epsilon}",
            "patches": len(patches),
            "seed": config.seed,
        }
    )

    n_patches = len(patches)
    global_step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = _learning_rate(config, epoch)
        order = RngStream(config.seed, "shuffle", epoch).permutation(n_patches)
        epoch_losses = []
        for start in range(0, n_patches, config.batch_size):
            sub = patches.subset(order[start : start + config.batch_size])
            cfg = config.estimator_config(
                probe_stream=RngStream(config.seed, "probe", epoch, global_step)
            )
            value, grad = loss_and_gradient(config.loss_kind, sub, model, cfg)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(
                    f"non-finite loss/gradient at epoch {epoch}, step {global_step} "
                    f"(loss={value!r})"
                )
            new_theta, state = adam_step(
                model.theta, grad, state, lr,
                beta1=config.beta1, beta2=config.beta2, eps=config.adam_epsilon,
            )
            model.theta = new_theta
            epoch_losses.append(value)
            global_step += 1
        row = {
            "epoch": epoch,
            "step": global_step,
            "lr": f"{lr:.8g}",
            "mean_loss": f"{np.mean(epoch_losses):.10g}",
            "val_psnr": "",
            "wall_ms": int((time.perf_counter() - t0) * 1000),
        }
        if val_data is not None and config.val_interval > 0 and (
            (epoch + 1) % config.val_interval == 0 or epoch == config.epochs - 1
        ):
            row["val_psnr"] = f"{_validation_psnr(model, val_data):.4f}"
        log.rows.append(row)

    return model, log
