"""Domain-invariant masked autoencoder toolkit (Python bindings)."""

from ._core import (
    IoError,
    NumericError,
    ValidationError,
    cp_style_mix,
    derive_seed,
    fft_compose,
    fft_decompose,
    generate_synthetic,
    linear_probe,
    lr_at,
    masked_mse,
    patchify,
    run_cli,
    sample_mask,
    style_view,
)

__all__ = [
    "IoError",
    "NumericError",
    "ValidationError",
    "cp_style_mix",
    "derive_seed",
    "fft_compose",
    "fft_decompose",
    "generate_synthetic",
    "linear_probe",
    "lr_at",
    "masked_mse",
    "patchify",
    "run_cli",
    "sample_mask",
    "style_view",
]
