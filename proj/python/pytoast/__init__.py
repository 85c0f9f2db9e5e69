"""Semantic communication toolkit: channels, codec, denoiser, scheduler, adapters and harness."""

import torch  # noqa: F401  loads libtorch before the extension

from ._pytoast import (
    ConfigError,
    DataError,
    DegenerateInputError,
    Error,
    FormatError,
    Model,
    NumericError,
    ShapeError,
    accuracy,
    adapt,
    apply_channel,
    channel_kinds,
    compute_reward,
    cosine_lr,
    epsilon_at,
    f1_macro,
    lambda_entropy,
    load_config,
    normalize_power,
    param_report,
    precondition,
    psnr,
    report,
    sigma_grid,
    snr_to_sigma,
    ssim,
    train,
    validate_config,
)

__all__ = [name for name in dir() if not name.startswith("_") and name != "torch"]
