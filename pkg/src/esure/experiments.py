"""Desk-scale experiment campaigns and PSNR evaluation.

Two campaign kinds mirror the headline comparisons:

* ``uncorrelated_pairs``: two independent realizations per clean image;
  methods SURE (one realization), SURE* (both realizations as a doubled
  single-realization dataset), N2N (regress one onto the other), eSURE
  (averaged target + re-noised input), and optionally the supervised MSE
  reference.
* ``imperfect_gt_sweep``: nested pairs built from a mildly-noisy ground
  truth, swept over sigma_gt at fixed total input noise.

Every member of a campaign sees bit-identical clean images, identical
network initialization, and bit-identical test noise; training-noise
streams are keyed by image index only, so sweep members share their
underlying standard-normal fields (common random numbers).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import load_clean_dir, synthesize_samples, synthetic_corpus
from .denoisers import Denoiser, build_denoiser, save_checkpoint
from .images import Image, psnr, gaussian_field
from .pairing import PairedSample, corollary_transform
from .rng import RngStream
from .training import TrainConfig, train

METRICS_SCHEMA = "esure-metrics-v1"
PLOTDATA_SCHEMA = "esure-plotdata-v1"

CAMPAIGN_KINDS = ("uncorrelated_pairs", "imperfect_gt_sweep")

METHOD_NAMES = {
    "mse": "MSE",
    "sure": "SURE",
    "sure_star": "SURE*",
    "n2n": "N2N",
    "esure": "eSURE",
}

METRICS_COLUMNS = (
    "method", "regime", "sigma_noisy_255", "sigma_gt_255",
    "psnr_mean_db", "psnr_std_db", "seed", "config_digest",
)


@dataclass
class CorpusConfig:
    train_count: int = 20
    test_count: int = 8
    size: int = 128
    source_dir: str | None = None  # PGM/tensor directory overrides synthesis


@dataclass
class CampaignConfig:
    kind: str
    sigma_noisy_255: float = 25.0
    sigma_gt_255_values: tuple[float, ...] = (1.0, 5.0, 10.0)
    methods: tuple[str, ...] = ()
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: dict = field(default_factory=dict)  # TrainConfig overrides

    def __post_init__(self):
        if self.kind not in CAMPAIGN_KINDS:
            raise ValueError(f"unknown campaign kind {self.kind!r}")
        if not self.methods:
            default = ("sure", "sure_star", "n2n", "esure") if self.kind == "uncorrelated_pairs" \
                else ("sure", "n2n", "esure")
            object.__setattr__(self, "methods", default)
        for m in self.methods:
            if m not in METHOD_NAMES:
                raise ValueError(f"unknown method {m!r} (expected one of {sorted(METHOD_NAMES)})")
        if self.sigma_noisy_255 <= 0:
            raise ValueError("sigma_noisy_255 must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "CampaignConfig":
        raw = dict(raw)
        corpus = CorpusConfig(**raw.pop("corpus", {}))
        if "sigma_gt_255_values" in raw:
            raw["sigma_gt_255_values"] = tuple(raw["sigma_gt_255_values"])
        if "methods" in raw:
            raw["methods"] = tuple(raw["methods"])
        return cls(corpus=corpus, **raw)


@dataclass
class ExperimentResult:
    method: str
    regime: str
    sigma_noisy_255: float
    sigma_gt_255: float
    psnr_mean_db: float
    psnr_std_db: float
    seed: int
    config_digest: str


# ---------------------------------------------------------------------------
# Evaluation


def make_test_set(cleans: list[Image], sigma: float, seed: int) -> list[PairedSample]:
    """Deterministic noisy test instances; the stream depends only on the
    eval seed and image index, so every method sees identical noise."""
    samples = []
    for i, clean in enumerate(cleans):
        noise = gaussian_field(RngStream(seed, "eval-noise", i), clean.shape, sigma)
        samples.append(
            PairedSample(
                input=Image(clean.data + noise.data), target=clean,
                sigma_input=sigma, sigma_target=0.0,
                mode="clean_target", clean=clean,
            )
        )
    return samples


def evaluate_psnr(denoiser: Denoiser, test_set: list[PairedSample]) -> tuple[list[float], float, float]:
    """Per-image PSNR of the denoised inputs against the clean oracles."""
    values = []
    for sample in test_set:
        estimate = denoiser.forward(sample.input.data[None])[0]
        values.append(psnr(sample.clean.data, estimate))
    arr = np.asarray(values)
    return values, float(arr.mean()), float(arr.std())


# ---------------------------------------------------------------------------
# Per-method training data


def _single_from_pair(pair: PairedSample, which: int) -> PairedSample:
    """Reuse one realization of an independent pair as a single-realization
    sample (clean oracle in the target slot)."""
    member = pair.input if which == 0 else pair.target
    return PairedSample(
        input=member, target=pair.clean, sigma_input=pair.sigma_input,
        sigma_target=0.0, mode="clean_target", clean=pair.clean,
    )


def _mse_from_pair(pair: PairedSample) -> PairedSample:
    return _single_from_pair(pair, 0)


def method_training_data(method: str, campaign_kind: str, base_samples: list[PairedSample],
                         seed: int) -> tuple[str, list[PairedSample]]:
    """(loss_kind, samples) for one campaign member.

    ``base_samples`` are independent pairs for the uncorrelated campaign and
    nested imperfect-ground-truth pairs for the sweep.
    """
    if campaign_kind == "uncorrelated_pairs":
        if method == "sure":
            return "sure", [_single_from_pair(p, 0) for p in base_samples]
        if method == "sure_star":
            # both realizations, concatenated: twice the singles
            doubled = [_single_from_pair(p, 0) for p in base_samples]
            doubled += [_single_from_pair(p, 1) for p in base_samples]
            return "sure", doubled
        if method == "n2n":
            return "n2n", base_samples
        if method == "esure":
            return "esure", [
                corollary_transform(p, RngStream(seed, "corollary", i))
                for i, p in enumerate(base_samples)
            ]
        if method == "mse":
            return "mse", [_mse_from_pair(p) for p in base_samples]
    else:
        if method == "sure":
            return "sure", [
                PairedSample(input=p.input, target=p.clean, sigma_input=p.sigma_input,
                             sigma_target=0.0, mode="clean_target", clean=p.clean)
                for p in base_samples
            ]
        if method == "n2n":
            return "n2n", base_samples
        if method == "esure":
            return "esure", base_samples
        if method == "mse":
            return "mse", [
                PairedSample(input=p.input, target=p.clean, sigma_input=p.sigma_input,
                             sigma_target=0.0, mode="clean_target", clean=p.clean)
                for p in base_samples
            ]
    raise ValueError(f"method {method!r} is not defined for campaign {campaign_kind!r}")


# ---------------------------------------------------------------------------
# Campaign driver


DESK_TRAIN_DEFAULTS = dict(
    epochs=50,
    batch_size=32,
    patch_size=32,
    stride=32,
    lr_initial=1e-3,
    lr_drop_factor=0.1,
    lr_drop_epoch=40,
    precision="float32",
    divergence_mode="monte_carlo",
    augment=True,
)

DESK_CNN = dict(layers=7, channels=16, kernel_size=3, in_channels=1)


def _campaign_cleans(cfg: CampaignConfig, seed: int) -> tuple[list[Image], list[Image]]:
    if cfg.corpus.source_dir:
        images = load_clean_dir(cfg.corpus.source_dir)
        need = cfg.corpus.train_count + cfg.corpus.test_count
        if len(images) < need:
            raise ValueError(
                f"corpus dir has {len(images)} images, campaign needs {need}"
            )
        return images[: cfg.corpus.train_count], images[cfg.corpus.train_count : need]
    train_cleans = synthetic_corpus(seed, cfg.corpus.train_count, cfg.corpus.size, "train")
    test_cleans = synthetic_corpus(seed, cfg.corpus.test_count, cfg.corpus.size, "test")
    return train_cleans, test_cleans


def run_experiment(cfg: CampaignConfig, seed: int, out_dir) -> list[ExperimentResult]:
    """Train one denoiser per (method, sigma_gt) member and evaluate all of
    them on identical test noise; emits metrics, plot data, and a figure.

    Rows are appended to the metrics CSV as members complete, so an aborted
    campaign preserves its partial results.
    """
    from .plots import render_experiment_figure  # deferred: keeps import light

    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"

    train_cleans, test_cleans = _campaign_cleans(cfg, seed)
    sigma = cfg.sigma_noisy_255 / 255.0
    test_set = make_test_set(test_cleans, sigma, seed)

    train_overrides = dict(DESK_TRAIN_DEFAULTS) | dict(cfg.train)
    init = build_denoiser(
        "small_cnn",
        DESK_CNN | {"dtype": train_overrides.get("precision", "float32")},
        init_stream=RngStream(seed, "init"),
    )

    if cfg.kind == "uncorrelated_pairs":
        members = [(m, 0.0) for m in cfg.methods]
        regime = "uncorrelated"
    else:
        members = [(m, g) for g in cfg.sigma_gt_255_values for m in cfg.methods]
        regime = "imperfect_gt"

    results: list[ExperimentResult] = []
    try:
        for method, sigma_gt_255 in members:
            if cfg.kind == "uncorrelated_pairs":
                base = synthesize_samples(
                    train_cleans, "uncorrelated_pair", cfg.sigma_noisy_255, seed
                )
            else:
                base = synthesize_samples(
                    train_cleans, "imperfect_gt", cfg.sigma_noisy_255, seed,
                    sigma_gt_255=sigma_gt_255,
                )
            loss_kind, samples = method_training_data(method, cfg.kind, base, seed)
            tconf = TrainConfig(loss_kind=loss_kind, seed=seed, **train_overrides)
            model, log = train(tconf, samples, init)

            tag = method if cfg.kind == "uncorrelated_pairs" else f"{method}_gt{sigma_gt_255:g}"
            save_checkpoint(model, out / "checkpoints" / f"{tag}.ckpt", tconf.digest())
            log.write_csv(out / "logs" / f"{tag}.csv")

            _, mean_db, std_db = evaluate_psnr(model, test_set)
            result = ExperimentResult(
                method=METHOD_NAMES[method], regime=regime,
                sigma_noisy_255=cfg.sigma_noisy_255, sigma_gt_255=sigma_gt_255,
                psnr_mean_db=mean_db, psnr_std_db=std_db,
                seed=seed, config_digest=tconf.digest(),
            )
            results.append(result)
            write_metrics_csv(metrics_path, [result], append=True)
    finally:
        if results:
            write_plot_data(out / "plot_data.csv", results)
            render_experiment_figure(results, out / "figure.png", cfg.kind)
    return results


# ---------------------------------------------------------------------------
# CSV outputs (schema-versioned, append-safe)


def write_metrics_csv(path, results: list[ExperimentResult], append: bool = False) -> None:
    path = Path(path)
    fresh = not (append and path.exists())
    with open(path, "a" if not fresh else "w", newline="") as f:
        if fresh:
            f.write(f"# schema={METRICS_SCHEMA}\n")
            csv.writer(f).writerow(METRICS_COLUMNS)
        writer = csv.writer(f)
        for r in results:
            writer.writerow([
                r.method, r.regime, f"{r.sigma_noisy_255:g}", f"{r.sigma_gt_255:g}",
                f"{r.psnr_mean_db:.6f}", f"{r.psnr_std_db:.6f}", r.seed, r.config_digest,
            ])


def read_metrics_csv(path) -> list[ExperimentResult]:
    results = []
    with open(path, newline="") as f:
        rows = [row for row in f if not row.startswith("#")]
    for record in csv.DictReader(rows):
        results.append(
            ExperimentResult(
                method=record["method"], regime=record["regime"],
                sigma_noisy_255=float(record["sigma_noisy_255"]),
                sigma_gt_255=float(record["sigma_gt_255"]),
                psnr_mean_db=float(record["psnr_mean_db"]),
                psnr_std_db=float(record["psnr_std_db"]),
                seed=int(record["seed"]), config_digest=record["config_digest"],
            )
        )
    return results


def write_plot_data(path, results: list[ExperimentResult]) -> None:
    """Wide table for plotting: one row per sigma_gt, one column per method."""
    methods = sorted({r.method for r in results}, key=lambda m: list(METHOD_NAMES.values()).index(m))
    sigma_gts = sorted({r.sigma_gt_255 for r in results})
    table = {(r.sigma_gt_255, r.method): r.psnr_mean_db for r in results}
    with open(path, "w", newline="") as f:
        f.write(f"# schema={PLOTDATA_SCHEMA}\n")
        writer = csv.writer(f)
        writer.writerow(["sigma_gt_255"] + methods)
        for g in sigma_gts:
            writer.writerow(
                [f"{g:g}"] + [
                    f"{table[(g, m)]:.6f}" if (g, m) in table else ""
                    for m in methods
                ]
            )
