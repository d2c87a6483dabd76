"""Command-line entry points.

Subcommands: ``synth``, ``train``, ``eval``, ``verify
{unbiasedness,identity,gradient}``, ``experiment``.  Each takes a JSON
config (--config), a --seed, and an --out path.  Exit codes: 0 pass,
1 verification failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .datasets import (
    load_clean_dir,
    load_samples,
    materialize,
    read_manifest,
    synthetic_corpus,
)
from .denoisers import build_denoiser, load_checkpoint, save_checkpoint
from .experiments import (
    CampaignConfig,
    evaluate_psnr,
    make_test_set,
    run_experiment,
)
from .rng import RngStream
from .training import TrainConfig, train
from .verify import (
    gradient_suite,
    identity_sweep,
    unbiasedness_suite,
    write_report_csv,
)


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 2."""


def _load_config(path, required: bool = True) -> dict:
    if path is None:
        if required:
            raise ConfigError("this command requires --config")
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None


def _cleans_from_config(cfg: dict, seed: int, purpose: str = "train") -> list:
    if cfg.get("source_dir"):
        return load_clean_dir(cfg["source_dir"])
    return synthetic_corpus(seed, int(cfg.get("count", 20)), int(cfg.get("size", 128)), purpose)


def _cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    regime = cfg.get("regime")
    if regime not in ("single", "uncorrelated_pair", "imperfect_gt"):
        raise ConfigError(f"synth config needs a regime, got {regime!r}")
    cleans = _cleans_from_config(cfg, args.seed)
    manifest = materialize(
        cleans,
        regime,
        float(cfg.get("sigma_noisy_255", 25.0)),
        args.seed,
        args.out,
        sigma_gt_255=float(cfg.get("sigma_gt_255", 0.0)),
        sigma_mode=cfg.get("sigma_mode", "total_sigma"),
    )
    print(f"wrote {len(manifest.items)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    manifest_path = cfg.get("manifest")
    if not manifest_path:
        raise ConfigError("train config needs a 'manifest' path")
    manifest = read_manifest(manifest_path)
    samples = load_samples(manifest, Path(manifest_path).parent)

    denoiser_cfg = dict(cfg.get("denoiser", {}))
    kind = denoiser_cfg.pop("kind", "small_cnn")
    train_keys = {f.name for f in TrainConfig.__dataclass_fields__.values()}  # noqa: SLF001
    overrides = {k: v for k, v in cfg.items() if k in train_keys}
    if "loss_kind" not in overrides:
        raise ConfigError("train config needs 'loss_kind'")
    overrides["seed"] = args.seed
    try:
        tconf = TrainConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from None

    denoiser_cfg.setdefault("dtype", tconf.precision)
    denoiser = build_denoiser(kind, denoiser_cfg, init_stream=RngStream(args.seed, "init"))
    model, log = train(tconf, samples, denoiser)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.ckpt", tconf.digest())
    log.write_csv(out / "train_log.csv")
    print(f"trained {kind} ({tconf.loss_kind}); checkpoint in {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    ckpt = cfg.get("checkpoint")
    if not ckpt:
        raise ConfigError("eval config needs a 'checkpoint' path")
    try:
        denoiser, _ = load_checkpoint(ckpt)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {ckpt}") from None

    sigma = float(cfg.get("sigma_255", 25.0)) / 255.0
    if cfg.get("manifest"):
        manifest = read_manifest(cfg["manifest"])
        samples = load_samples(manifest, Path(cfg["manifest"]).parent)
        cleans = [s.clean for s in samples]
    else:
        cleans = _cleans_from_config(cfg.get("corpus", {"count": 8}), args.seed, "test")
    test_set = make_test_set(cleans, sigma, args.seed)
    per_image, mean_db, std_db = evaluate_psnr(denoiser, test_set)

    with open(args.out, "w", newline="") as f:
        f.write("# schema=esure-eval-v1\n")
        writer = csv.writer(f)
        writer.writerow(["image", "psnr_db"])
        for i, value in enumerate(per_image):
            writer.writerow([i, f"{value:.6f}"])
        writer.writerow(["mean", f"{mean_db:.6f}"])
        writer.writerow(["std", f"{std_db:.6f}"])
    print(f"mean PSNR {mean_db:.3f} dB over {len(per_image)} images -> {args.out}")
    return 0


def _cmd_verify(args) -> int:
    from .datasets import synthetic_texture

    cfg = _load_config(args.config, required=False)
    if args.check == "unbiasedness":
        clean = synthetic_texture(
            RngStream(args.seed, "verify-image"), int(cfg.get("size", 32)), int(cfg.get("size", 32))
        )
        reports = unbiasedness_suite(
            clean,
            draws=int(cfg.get("draws", 20000)),
            seed=args.seed,
            sigma=float(cfg.get("sigma_255", 25.0)) / 255.0,
            sigma_gt=float(cfg.get("sigma_gt_255", 10.0)) / 255.0,
            threshold=float(cfg.get("threshold", 4.0)),
        )
        if args.out:
            write_report_csv(args.out, reports)
        ok = True
        for r in reports:
            verdict = "ok" if r.matches_expectation else "FAIL"
            expected = "unbiased" if r.expect_unbiased else "biased-by-design"
            print(f"{verdict}: {r.estimator} / {r.denoiser_kind} z={r.z_score:+.2f} ({expected})")
            ok = ok and r.matches_expectation
        return 0 if ok else 1

    if args.check == "identity":
        tolerance = float(cfg.get("tolerance", 1e-12))
        worst = identity_sweep(seed=args.seed, samples=int(cfg.get("samples", 100)))
        print(f"max |paired-independent - (n2n - sigma^2)| = {worst:.3e} (tol {tolerance:g})")
        if args.out:
            with open(args.out, "w", newline="") as f:
                f.write("# schema=esure-identity-v1\n")
                csv.writer(f).writerows([["max_deviation", "tolerance"],
                                         [f"{worst:.6e}", f"{tolerance:g}"]])
        return 0 if worst <= tolerance else 1

    # gradient
    cases = gradient_suite(seed=args.seed)
    ok = True
    for case in cases:
        verdict = "ok" if case["max_rel_err"] <= case["tolerance"] else "FAIL"
        print(f"{verdict}: {case['name']} rel_err={case['max_rel_err']:.3e} "
              f"(tol {case['tolerance']:g})")
        ok = ok and case["max_rel_err"] <= case["tolerance"]
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write("# schema=esure-gradient-v1\n")
            writer = csv.writer(f)
            writer.writerow(["case", "max_rel_err", "tolerance", "passed"])
            for case in cases:
                writer.writerow([case["name"], f"{case['max_rel_err']:.6e}",
                                 f"{case['tolerance']:g}",
                                 int(case["max_rel_err"] <= case["tolerance"])])
    return 0 if ok else 1


def _cmd_experiment(args) -> int:
    raw = _load_config(args.config)
    try:
        cfg = CampaignConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad campaign config: {exc}") from None
    results = run_experiment(cfg, args.seed, args.out)
    for r in results:
        print(f"{r.method:6s} sigma_gt={r.sigma_gt_255:g}: "
              f"{r.psnr_mean_db:.3f} +/- {r.psnr_std_db:.3f} dB")
    print(f"metrics, plot data, and figure in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esure",
        description="Unbiased-risk denoiser training: data synthesis, training, "
                    "verification, and experiment campaigns.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config path")
        p.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
        p.add_argument("--out", required=out_required, help="output path")

    common(sub.add_parser("synth", help="materialize a noisy dataset + manifest"))
    common(sub.add_parser("train", help="train a denoiser from a manifest"))
    common(sub.add_parser("eval", help="PSNR-evaluate a checkpoint"))
    p_verify = sub.add_parser("verify", help="run verification checks")
    p_verify.add_argument("check", choices=["unbiasedness", "identity", "gradient"])
    common(p_verify, out_required=False)
    common(sub.add_parser("experiment", help="run a desk-scale campaign"))
    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "verify": _cmd_verify,
    "experiment": _cmd_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
