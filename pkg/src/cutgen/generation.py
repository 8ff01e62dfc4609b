"""One-image generation pipeline: foreground masking, noising the normal
image to the start step, the optimize-then-denoise loop, decoding, and
coarse annotation extraction from the final attention map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .attention import (AggregatedAttention, RefinementThresholds, SchedulerState,
                        aggregate_attention, anomaly_token_map, count_activated,
                        masked_max, optimize_step, should_stop)
from .diffusion import Backbone, forward_noise
from .types import (AnnotatedSample, ForegroundMask, ImageSample, LatentState,
                    ValidationError, derive_seed, make_foreground_mask, resample_mask,
                    validate_sample)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationConfig:
    gamma: float = 0.25
    steps: int = 200
    prompt_template: str = "A photo of a [cls] that is damaged"
    anomaly_word: str = "damaged"
    seed: int = 0
    lambda_: float = 10.0
    delta_t: float | None = None  # None resolves to 1/steps
    min_pixels: int = 10
    max_pixels_for_stop: int = 50
    warmup_steps: int = 10
    thresholds: RefinementThresholds = field(default_factory=RefinementThresholds)
    smoothing_kernel: int = 3
    smoothing_sigma: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ValidationError("gamma must lie in [0, 1]")
        if self.steps < 10:
            raise ValidationError("steps must be >= 10")

    @property
    def resolved_delta_t(self) -> float:
        return self.delta_t if self.delta_t is not None else 1.0 / self.steps

    def t_start(self) -> int:
        return int(round(self.steps * (1.0 - self.gamma)))


class GenerationError(RuntimeError):
    pass


def otsu_threshold(gray8: np.ndarray) -> int:
    """Otsu's threshold on an 8-bit grayscale image (maximizes between-class variance)."""
    hist = np.bincount(gray8.ravel(), minlength=256).astype(np.float64)
    w0 = np.cumsum(hist)
    w1 = hist.sum() - w0
    m = np.cumsum(hist * np.arange(256))
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m / w0
        mu1 = (m[-1] - m) / w1
        var_between = w0 * w1 * (mu0 - mu1) ** 2
    var_between[~np.isfinite(var_between)] = -1.0
    return int(np.argmax(var_between[:-1]))


def foreground_mask(img: ImageSample, latent_side: int) -> ForegroundMask:
    """Global Otsu threshold on grayscale, polarity chosen so the image-border
    majority is background, one 3x3 morphological closing, renderings at full,
    latent, and 16x16 resolutions. Degenerate images fall back to all-foreground.
    """
    validate_sample(img)
    gray8 = np.round(img.pixels.mean(axis=2) * 255.0).astype(np.uint8)
    th = otsu_threshold(gray8)
    binary = gray8 > th
    border = np.concatenate([binary[0, :], binary[-1, :], binary[:, 0], binary[:, -1]])
    fg = ~binary if border.mean() > 0.5 else binary
    fg = ndimage.binary_closing(fg, structure=np.ones((3, 3), dtype=bool))
    return make_foreground_mask(fg, latent_side)


def conditioning_start(img: ImageSample, cfg: GenerationConfig, backbone: Backbone) -> LatentState:
    """Encode the normal image and noise it to t_start = round(T (1 - gamma))."""
    t_start = cfg.t_start()
    z0 = backbone.encode(img.pixels)
    z = forward_noise(backbone.schedule, z0, t_start, derive_seed(cfg.seed, "forward-noise"))
    return LatentState(z=z, t=t_start, T=cfg.steps)


def extract_annotation(abar_final: AggregatedAttention, j_set, mask: ForegroundMask,
                       target_hw: tuple[int, int]) -> np.ndarray:
    """Anomaly-token map, min-max normalized over the foreground, bilinearly
    upsampled; background pixels are exactly zero. A constant foreground map
    (min == max) yields all-zeros."""
    jmap = anomaly_token_map(abar_final, j_set).detach().numpy()
    fg16 = np.asarray(mask.mask16, dtype=bool)
    vals = jmap[fg16]
    norm = np.zeros_like(jmap)
    lo, hi = vals.min(), vals.max()
    if hi > lo:
        norm[fg16] = (vals - lo) / (hi - lo)
    t = torch.as_tensor(norm, dtype=torch.float64)[None, None]
    up = F.interpolate(t, size=target_hw, mode="bilinear", align_corners=False)[0, 0].numpy()
    mask_full = mask.mask_full
    if mask_full.shape != tuple(target_hw):
        mask_full = resample_mask(mask_full, target_hw[0])
    up *= mask_full
    return np.clip(up, 0.0, 1.0)


def quantize8(x: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so on-disk PNG round trips are lossless."""
    return np.round(x * 255.0) / 255.0


def generate(img: ImageSample, cfg: GenerationConfig, backbone: Backbone) -> AnnotatedSample:
    """Full single-sample generation; deterministic given cfg.seed."""
    validate_sample(img)
    if backbone.schedule.T != cfg.steps:
        raise ValidationError(f"backbone schedule T={backbone.schedule.T} != cfg.steps={cfg.steps}")
    prompt = backbone.build_prompt(cfg.prompt_template, img.category, cfg.anomaly_word)
    mask = foreground_mask(img, backbone.latent_side)
    z = conditioning_start(img, cfg, backbone)
    j_set = prompt.anomaly_token_indices

    def aggregated(state: LatentState) -> AggregatedAttention:
        return aggregate_attention(backbone.capture_attention(state, prompt),
                                   cfg.smoothing_kernel, cfg.smoothing_sigma)

    abar = aggregated(z)
    n_start = max(1, count_activated(anomaly_token_map(abar, j_set), mask.mask16))
    state = SchedulerState(
        lambda_=cfg.lambda_, delta_t=cfg.resolved_delta_t, n_start=n_start,
        t_start=z.t, min_pixels=cfg.min_pixels,
        max_pixels_for_stop=cfg.max_pixels_for_stop, warmup_steps=cfg.warmup_steps,
    )

    steps_done = 0
    try:
        for _t in range(z.t, 0, -1):
            abar = aggregated(z)
            n_t = count_activated(anomaly_token_map(abar, j_set), mask.mask16)
            should_stop(state, steps_done, n_t)
            if not state.stopped and cfg.lambda_ != 0.0:
                z = optimize_step(z, prompt, mask, state, cfg.thresholds, backbone, abar=abar)
            z, _ = backbone.denoise_step(z, prompt, seed=cfg.seed)
            steps_done += 1
    except ValidationError:
        raise
    except Exception as exc:  # attach step context before propagating
        raise GenerationError(f"backbone failure at t={z.t} (seed={cfg.seed}): {exc}") from exc

    final_abar = aggregated(z)
    hw = img.pixels.shape[:2]
    pixels = quantize8(backbone.decode(z.z, out_hw=hw))
    y_pix = quantize8(extract_annotation(final_abar, j_set, mask, hw))
    return AnnotatedSample(
        image=ImageSample(pixels=pixels, category=img.category),
        y_img=1,
        y_pix=y_pix,
        prompt=prompt,
        seed=cfg.seed,
        gamma=cfg.gamma,
        metadata={
            "source_normal": img.path or "",
            "final_attention": masked_max(final_abar, j_set, mask.mask16),
            "n_start": n_start,
            "stopped_early": state.stopped,
        },
    )


def batch_generate(normals: list[ImageSample], per_image: int, cfg: GenerationConfig,
                   backbone: Backbone, include_normals: bool = True) -> list[AnnotatedSample]:
    """per_image generated samples per conditioning normal, seeds base + running
    index; the conditioning normals themselves are appended as y_img=0 samples.
    Individual failures are logged and skipped; only a fully failed job raises.
    """
    if per_image < 1:
        raise ValidationError(f"per_image must be >= 1, got {per_image}")
    samples: list[AnnotatedSample] = []
    failures: list[str] = []
    running = 0
    for img in normals:
        for _ in range(per_image):
            sample_cfg = replace(cfg, seed=cfg.seed + running)
            running += 1
            try:
                samples.append(generate(img, sample_cfg, backbone))
            except Exception as exc:
                failures.append(f"{img.path} seed={sample_cfg.seed}: {exc}")
                log.warning("generation failed for %s (seed=%d): %s", img.path, sample_cfg.seed, exc)
    if failures and not samples:
        raise GenerationError("all generations failed: " + "; ".join(failures[:5]))
    if include_normals:
        for img in normals:
            px = quantize8(img.pixels)
            samples.append(AnnotatedSample(
                image=ImageSample(pixels=px, category=img.category),
                y_img=0, y_pix=np.zeros(px.shape[:2]), prompt=None,
                seed=cfg.seed, gamma=cfg.gamma,
                metadata={"source_normal": img.path or ""},
            ))
    return samples
