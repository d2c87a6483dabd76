"""Unbiased-risk training losses for Gaussian denoising.

A denoiser can be trained without clean targets by minimizing a statistic
of the noisy data whose expectation equals the true MSE.  This package
implements that family of losses (single-realization SURE with analytic or
Monte-Carlo divergence, the paired extension for correlated realizations,
and Noise2Noise), a small differentiable denoiser zoo, deterministic noisy
dataset synthesis, a minibatch trainer, and an empirical verification
harness with a CLI.
"""

from .images import (
    FormatError,
    Image,
    NoiseSpec,
    gaussian_field,
    psnr,
    read_pgm,
    read_tensor,
    write_pgm,
    write_tensor,
)
from .rng import RngStream
from .pairing import (
    PairedSample,
    PatchBatch,
    blind_patch_batch,
    corollary_transform,
    extract_patches,
    make_imperfect_gt_pair,
    make_single,
    make_uncorrelated_pair,
    synth_noisy,
)
from .denoisers import (
    Denoiser,
    UnsupportedDivergenceError,
    build_denoiser,
    load_checkpoint,
    save_checkpoint,
)
from .losses import (
    EstimateValue,
    EstimatorConfig,
    epsilon_rule,
    esure_loss,
    loss_and_gradient,
    loss_gradient,
    loss_value,
    mc_divergence,
    mse_loss,
    n2n_loss,
    sure_loss,
)
from .training import (
    AdamState,
    IncompatibleRegimeError,
    TrainConfig,
    TrainingDivergedError,
    TrainingLog,
    adam_step,
    init_adam_state,
    train,
)
from .verify import (
    VerificationReport,
    closed_form_risk,
    identity_sweep,
    unbiasedness_suite,
    verify_gradient,
    verify_identity_n2n,
    verify_unbiasedness,
)
from .experiments import (
    CampaignConfig,
    ExperimentResult,
    evaluate_psnr,
    make_test_set,
    run_experiment,
)

__version__ = "0.1.0"
