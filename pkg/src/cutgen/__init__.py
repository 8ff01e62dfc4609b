"""Anomaly sample generation by attention-steered latent denoising, plus a
vision-language detector trained on the generated image-annotation pairs."""

from .types import (AnnotatedSample, AttentionStack, ForegroundMask, ImageSample,
                    LatentState, PromptSpec, ValidationError)

__all__ = [
    "AnnotatedSample",
    "AttentionStack",
    "ForegroundMask",
    "ImageSample",
    "LatentState",
    "PromptSpec",
    "ValidationError",
]

__version__ = "0.1.0"
