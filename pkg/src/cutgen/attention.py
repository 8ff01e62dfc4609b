"""Attention aggregation and the mask-guided latent optimization loop:
the attention loss, its masked gradient update, the localization-aware
step-size schedule, per-step refinement targets, and early stopping.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import Backbone, grad_wrt_latent
from .types import AttentionStack, ForegroundMask, LatentState, PromptSpec, ValidationError

log = logging.getLogger(__name__)


@dataclass
class AggregatedAttention:
    """Mean 16x16 attention, re-normalized over tokens, Gaussian-smoothed.

    abar: 16 x 16 x N tensor; kept as torch so the optimization path stays
    differentiable end to end.
    """

    abar: torch.Tensor
    t: int


@dataclass
class SchedulerState:
    """Mutable per-job state of the localization-aware step-size schedule."""

    lambda_: float = 10.0
    delta_t: float = 1.0 / 200.0
    n_start: int = 1
    t_start: int = 150
    min_pixels: int = 10
    max_pixels_for_stop: int = 50
    warmup_steps: int = 10
    stopped: bool = False

    def __post_init__(self):
        if self.n_start < 1:
            raise ValidationError("n_start must be >= 1")
        if not (0.0 < self.delta_t <= 1.0):
            raise ValidationError("delta_t must lie in (0, 1]")


@dataclass(frozen=True)
class RefinementThresholds:
    """Per-step refinement targets for the max in-mask anomaly attention.

    Each target activates at its fraction of the optimization window;
    between checkpoints a single gradient step per denoise step is taken.
    """

    values: tuple[float, ...] = (0.05, 0.5, 0.8)
    checkpoints: tuple[float, ...] = (0.25, 0.5, 0.75)
    max_iters: int = 20

    def __post_init__(self):
        if len(self.values) != len(self.checkpoints):
            raise ValidationError("one checkpoint fraction per threshold required")
        if any(not (0.0 < v < 1.0) for v in self.values):
            raise ValidationError("thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValidationError("thresholds must be strictly increasing")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")

    def checkpoint_map(self, t_start: int) -> dict[int, float]:
        """Timestep -> target map; on collisions the later-progress target wins."""
        return {int(round(t_start * (1.0 - f))): v for f, v in zip(self.checkpoints, self.values)}


def gaussian_kernel(size: int = 3, sigma: float = 0.5) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    xx, yy = torch.meshgrid(ax, ax, indexing="ij")
    k = torch.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_smooth(maps: torch.Tensor, size: int = 3, sigma: float = 0.5) -> torch.Tensor:
    """Smooth each token channel of an H x W x N stack independently (reflect padding)."""
    h, w, n = maps.shape
    k = gaussian_kernel(size, sigma).to(maps.dtype).reshape(1, 1, size, size)
    x = maps.permute(2, 0, 1).unsqueeze(1)
    pad = size // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    out = F.conv2d(x, k)
    return out.squeeze(1).permute(1, 2, 0)


def aggregate_attention(stack: AttentionStack, kernel_size: int = 3, sigma: float = 0.5) -> AggregatedAttention:
    """Mean of the 16x16 maps, token-axis softmax, then per-token smoothing."""
    maps16 = [torch.as_tensor(m, dtype=torch.float64) if not torch.is_tensor(m) else m
              for m in stack.maps if m.shape[0] == 16 and m.shape[1] == 16]
    if not maps16:
        raise ValidationError("attention stack holds no 16x16 maps")
    mean = torch.stack(maps16).mean(dim=0)
    norm = torch.softmax(mean, dim=-1)
    return AggregatedAttention(abar=gaussian_smooth(norm, kernel_size, sigma), t=stack.t)


def anomaly_token_map(abar: AggregatedAttention, j_set) -> torch.Tensor:
    """16x16 map for the anomaly word; subword token maps are averaged."""
    if not j_set:
        raise ValidationError("empty anomaly token set")
    idx = sorted(j_set)
    return abar.abar[:, :, idx].mean(dim=-1)


def latt(abar: AggregatedAttention, j_set, mask16: np.ndarray) -> torch.Tensor:
    """Attention loss: 1 minus the max anomaly-token attention inside the mask."""
    m = torch.as_tensor(np.asarray(mask16, dtype=bool))
    if not bool(m.any()):
        raise ValidationError("mask16 has no foreground pixel")
    jmap = anomaly_token_map(abar, j_set)
    return 1.0 - jmap[m].max()


def masked_max(abar: AggregatedAttention, j_set, mask16: np.ndarray) -> float:
    return float(1.0 - latt(abar, j_set, mask16))


def count_activated(abar_j, mask16: np.ndarray) -> int:
    """Foreground pixels strictly above the foreground mean of the smoothed map."""
    vals = abar_j.detach().numpy() if torch.is_tensor(abar_j) else np.asarray(abar_j)
    fg = vals[np.asarray(mask16, dtype=bool)]
    if fg.size == 0:
        return 0
    return int((fg > fg.mean()).sum())


def step_size(state: SchedulerState, t: int, n_t: int) -> float:
    """Localization-aware step size: shrinks as the activated area shrinks."""
    return state.lambda_ * (1.0 + state.delta_t * t) * (n_t / state.n_start)


def should_stop(state: SchedulerState, steps_done: int, n_t: int) -> bool:
    """Latched early stop once the activated area enters the target band
    after the warm-up steps."""
    if state.stopped:
        return True
    if steps_done >= state.warmup_steps and state.min_pixels < n_t < state.max_pixels_for_stop:
        state.stopped = True
    return state.stopped


def optimize_step(z: LatentState, prompt: PromptSpec, mask: ForegroundMask,
                  state: SchedulerState, thresholds: RefinementThresholds,
                  backbone: Backbone, abar: AggregatedAttention | None = None) -> LatentState:
    """Masked gradient updates on z at its current timestep.

    At a refinement checkpoint, repeats the update until the in-mask max
    attention reaches the active target or max_iters is exhausted; at every
    other timestep exactly one gradient step is taken. Latent entries
    outside the foreground mask are never touched.
    """
    if state.stopped:
        raise ValidationError("scheduler already stopped; optimize_step must not be called")
    if abar is None:
        abar = aggregate_attention(backbone.capture_attention(z, prompt))
    j_set = prompt.anomaly_token_indices
    n_t = count_activated(anomaly_token_map(abar, j_set), mask.mask16)
    alpha = step_size(state, z.t, n_t)
    if alpha == 0.0:
        return z

    target = thresholds.checkpoint_map(state.t_start).get(z.t)
    iters = thresholds.max_iters if target is not None else 1
    mask_lat = np.asarray(mask.mask_lat, dtype=bool)

    def loss_fn(stack: AttentionStack) -> torch.Tensor:
        return latt(aggregate_attention(stack), j_set, mask.mask16)

    cur = z
    for _ in range(iters):
        if target is not None and masked_max(abar, j_set, mask.mask16) >= target:
            return cur
        g = grad_wrt_latent(backbone, cur, prompt, loss_fn)
        cur = cur.with_z(np.where(mask_lat[None, :, :], cur.z - alpha * g, cur.z))
        if target is not None:
            abar = aggregate_attention(backbone.capture_attention(cur, prompt))
    if target is not None and masked_max(abar, j_set, mask.mask16) < target:
        log.info("refinement at t=%d exhausted %d iterations below target %.2f (max=%.4f)",
                 z.t, thresholds.max_iters, target, masked_max(abar, j_set, mask.mask16))
    return cur
