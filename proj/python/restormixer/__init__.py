"""Python bindings for the restoration network, its metrics and synthetic data."""

from ._core import (
    ConfigError,
    Error,
    IoError,
    Model,
    ShapeError,
    load_image,
    procedural_image,
    psnr,
    save_image,
    ssim,
    synth_degrade,
    total_loss,
    verify,
)

__all__ = [
    "ConfigError",
    "Error",
    "IoError",
    "Model",
    "ShapeError",
    "load_image",
    "procedural_image",
    "psnr",
    "save_image",
    "ssim",
    "synth_degrade",
    "total_loss",
    "verify",
]
