"""Shared domain types and validated array wrappers.

All pixel arrays are channel-last float arrays in [0, 1]; masks are boolean
arrays. Instances are treated as immutable after construction and may be
shared across concurrent generation jobs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""


MIN_IMAGE_SIDE = 64


@dataclass(frozen=True)
class ImageSample:
    """An RGB image with its object category.

    pixels: H x W x 3 float array, values in [0, 1], H and W >= 64.
    """

    pixels: np.ndarray
    category: str
    path: str | None = None


def validate_sample(s: ImageSample) -> ImageSample:
    """Check all ImageSample invariants; return the sample unchanged."""
    px = s.pixels
    if not isinstance(px, np.ndarray) or px.ndim != 3 or px.shape[2] != 3:
        raise ValidationError(f"expected H x W x 3 pixel array, got shape {getattr(px, 'shape', None)}")
    h, w = px.shape[:2]
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ValidationError(f"undersized image: {h}x{w}, minimum side is {MIN_IMAGE_SIDE}")
    if not np.all(np.isfinite(px)):
        raise ValidationError("pixel array contains NaN or Inf")
    if px.min() < 0.0 or px.max() > 1.0:
        raise ValidationError(f"pixel values outside [0, 1]: min={px.min():.4g} max={px.max():.4g}")
    return s


@dataclass(frozen=True)
class LatentState:
    """The evolving latent tensor plus timestep bookkeeping during denoising.

    z: C x P x P float64 array; t: current timestep in [0, T].
    """

    z: np.ndarray
    t: int
    T: int

    def __post_init__(self):
        if not (0 <= self.t <= self.T):
            raise ValidationError(f"timestep {self.t} outside [0, {self.T}]")
        if not np.all(np.isfinite(self.z)):
            raise ValidationError("latent contains NaN or Inf")

    def with_z(self, z: np.ndarray, t: int | None = None) -> "LatentState":
        return LatentState(z=z, t=self.t if t is None else t, T=self.T)


@dataclass(frozen=True)
class PromptSpec:
    """A tokenized text prompt with the anomaly-word token positions marked.

    anomaly_token_indices are 0-based positions into ``tokens``.
    """

    text: str
    tokens: tuple[int, ...]
    anomaly_token_indices: frozenset[int]
    class_name: str

    def __post_init__(self):
        if not self.anomaly_token_indices:
            raise ValidationError("anomaly_token_indices must be non-empty")
        n = len(self.tokens)
        bad = [j for j in self.anomaly_token_indices if not (0 <= j < n)]
        if bad:
            raise ValidationError(f"anomaly token indices {bad} outside [0, {n})")

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


@dataclass
class AttentionStack:
    """Cross-attention probability maps captured during one denoise pass.

    maps: list of P x P x N arrays (torch tensors on the differentiable
    capture path, numpy otherwise), one per source layer. Each spatial
    location's token vector is a probability distribution (nonnegative,
    sums to 1). Not validated at construction so gradient-carrying tensors
    pass through untouched; the invariants are property-tested instead.
    """

    maps: list[Any]
    layer_ids: list[str]
    t: int

    def maps_at(self, side: int) -> list[Any]:
        return [m for m in self.maps if m.shape[0] == side and m.shape[1] == side]


@dataclass(frozen=True)
class ForegroundMask:
    """One foreground mask rendered at the three resolutions it is used at.

    The full-resolution rendering must have foreground; a low-resolution
    rendering may come out empty for degenerate inputs (pipeline
    construction falls back to all-foreground in that case).
    """

    mask16: np.ndarray
    mask_lat: np.ndarray
    mask_full: np.ndarray

    def __post_init__(self):
        for name, m in (("mask16", self.mask16), ("mask_lat", self.mask_lat), ("mask_full", self.mask_full)):
            if m.dtype != np.bool_:
                raise ValidationError(f"{name} must be boolean")
        if not self.mask_full.any():
            raise ValidationError("mask_full has no foreground pixel")
        if self.mask16.shape != (16, 16):
            raise ValidationError(f"mask16 must be 16x16, got {self.mask16.shape}")


@dataclass(frozen=True)
class AnnotatedSample:
    """A generated image with image-level and soft pixel-level annotations."""

    image: ImageSample
    y_img: int
    y_pix: np.ndarray
    prompt: PromptSpec | None
    seed: int
    gamma: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.y_img not in (0, 1):
            raise ValidationError(f"y_img must be 0 or 1, got {self.y_img}")
        if self.y_pix.shape != self.image.pixels.shape[:2]:
            raise ValidationError(
                f"y_pix shape {self.y_pix.shape} does not match image {self.image.pixels.shape[:2]}"
            )
        if self.y_pix.size and (self.y_pix.min() < 0.0 or self.y_pix.max() > 1.0):
            raise ValidationError("y_pix values outside [0, 1]")
        if self.y_img == 0 and self.y_pix.any():
            raise ValidationError("normal sample (y_img=0) must have an all-zero pixel map")


def resample_mask(m: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbor resample a binary mask to target x target.

    Uses pixel-center index mapping, so integer upscales followed by the
    matching downscale round-trip exactly.
    """
    if target <= 0:
        raise ValidationError(f"target side must be positive, got {target}")
    m = np.asarray(m)
    if m.size == 0:
        raise ValidationError("empty mask")
    h, w = m.shape
    rows = np.floor((np.arange(target) + 0.5) * h / target).astype(int)
    cols = np.floor((np.arange(target) + 0.5) * w / target).astype(int)
    return m[np.ix_(rows, cols)].astype(bool)


def make_foreground_mask(mask_full: np.ndarray, latent_side: int) -> ForegroundMask:
    """Render one full-resolution mask at all three consumption resolutions.

    Falls back to all-foreground (at every resolution) when any rendering
    would come out empty, so downstream max/gradient masking stays defined.
    """
    mask_full = mask_full.astype(bool)
    if not mask_full.any():
        mask_full = np.ones_like(mask_full, dtype=bool)
    m16 = resample_mask(mask_full, 16)
    mlat = resample_mask(mask_full, latent_side)
    if not (m16.any() and mlat.any()):
        mask_full = np.ones_like(mask_full, dtype=bool)
        m16 = np.ones((16, 16), dtype=bool)
        mlat = np.ones((latent_side, latent_side), dtype=bool)
    return ForegroundMask(mask16=m16, mask_lat=mlat, mask_full=mask_full)


def stable_hash(*parts: Any) -> int:
    """Deterministic 63-bit hash of heterogeneous parts, for seed derivation."""
    import hashlib

    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF


def derive_seed(base: int, *parts: Sequence[Any]) -> int:
    return stable_hash(base, *parts)
