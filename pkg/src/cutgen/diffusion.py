"""Latent denoising backend: noise schedule, a deterministic toy backbone
with genuine cross-attention capture, and the differentiable path from an
attention loss back to the latent.

The toy backbone is small enough for exact finite-difference and
straight-line oracles; the adapter contract for a pretrained latent
diffusion model lives in ``sd_adapter``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .types import AttentionStack, LatentState, PromptSpec, ValidationError, derive_seed, stable_hash


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process definition: betas for t = 1..T and cumulative alphas.

    alpha_bar has length T + 1 with alpha_bar[0] = 1, so t = 0 means
    "no noise" exactly.
    """

    T: int
    betas: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if len(self.betas) != self.T or len(self.alpha_bar) != self.T + 1:
            raise ValidationError("schedule arrays inconsistent with T")
        if self.alpha_bar[0] != 1.0:
            raise ValidationError("alpha_bar[0] must be 1")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValidationError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] <= 0 or self.alpha_bar.max() > 1.0:
            raise ValidationError("alpha_bar must lie in (0, 1]")


def linear_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T=T, betas=betas, alpha_bar=alpha_bar)


def forward_noise(schedule: NoiseSchedule, z0: np.ndarray, t: int, seed: int) -> np.ndarray:
    """Noise a clean latent to timestep t: sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) eps."""
    if not (0 <= t <= schedule.T):
        raise ValidationError(f"timestep {t} outside [0, {schedule.T}]")
    if t == 0:
        return z0.copy()
    eps = np.random.default_rng(seed).standard_normal(z0.shape)
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


class Backbone(Protocol):
    """Contract every denoising backbone satisfies.

    denoise_step and capture_attention are deterministic given
    (latent, timestep, prompt, seed); captured maps are the pre-value
    softmax(Q K^T / sqrt(d)) probability distributions over tokens,
    one per cross-attention layer.
    """

    latent_side: int
    latent_channels: int
    token_limit: int
    schedule: NoiseSchedule

    def encode(self, pixels: np.ndarray) -> np.ndarray: ...
    def decode(self, z: np.ndarray) -> np.ndarray: ...
    def tokenize(self, text: str) -> tuple[int, ...]: ...
    def build_prompt(self, template: str, class_name: str, anomaly_word: str) -> PromptSpec: ...
    def text_encode(self, prompt: PromptSpec) -> np.ndarray: ...
    def denoise_step(self, z: LatentState, prompt: PromptSpec, capture: bool = False,
                     seed: int = 0) -> tuple[LatentState, AttentionStack | None]: ...
    def capture_attention(self, z: LatentState, prompt: PromptSpec) -> AttentionStack: ...
    def attention_with_grad(self, z_t: torch.Tensor, t: int, prompt: PromptSpec) -> AttentionStack: ...


@dataclass(frozen=True)
class ToyBackboneConfig:
    latent_side: int = 8
    latent_channels: int = 4
    token_limit: int = 8
    weight_seed: int = 7
    d_model: int = 16
    d_attn: int = 16
    d_value: int = 8
    d_text: int = 16
    vocab: int = 512
    T: int = 200

    def __post_init__(self):
        for name in ("latent_side", "latent_channels", "token_limit", "d_model", "d_attn", "d_value", "d_text", "vocab"):
            if getattr(self, name) < 2:
                raise ValidationError(f"{name} must be >= 2")


class ToyBackbone:
    """Deterministic two-layer denoiser with one real cross-attention layer.

    Weights are fixed pseudo-random draws from the config seed; every method
    is a pure function of its arguments, so jobs are reproducible bit for bit.
    Runs in float64 so finite-difference oracles are tight.
    """

    ATTENTION_SIDE = 16

    def __init__(self, config: ToyBackboneConfig | None = None, schedule: NoiseSchedule | None = None):
        cfg = config or ToyBackboneConfig()
        self.config = cfg
        self.latent_side = cfg.latent_side
        self.latent_channels = cfg.latent_channels
        self.token_limit = cfg.token_limit
        self.schedule = schedule or linear_schedule(cfg.T)

        g = torch.Generator().manual_seed(cfg.weight_seed)
        d = torch.float64

        def rand(*shape, scale=1.0):
            return torch.randn(*shape, generator=g, dtype=d) * scale

        c, dm, da, dv, dt = cfg.latent_channels, cfg.d_model, cfg.d_attn, cfg.d_value, cfg.d_text
        p2 = self.ATTENTION_SIDE ** 2
        self.embed = rand(cfg.vocab, dt)
        self.w_phi = rand(dm, c, scale=1.0 / math.sqrt(c))
        self.pos = rand(p2, dm, scale=0.5)
        self.w_time = rand(dm, scale=0.5)
        self.w_q = rand(da, dm, scale=1.0 / math.sqrt(dm))
        self.w_k = rand(da, dt, scale=1.0 / math.sqrt(dt))
        self.w_v = rand(dv, dt, scale=1.0 / math.sqrt(dt))
        self.w_out = rand(c, dv, scale=1.0 / math.sqrt(dv))
        self.w_mix = rand(c, c, scale=1.0 / math.sqrt(c))
        self.b_mix = rand(c, scale=0.1)
        self.w_enc = rand(c, 3)
        self.b_enc = rand(c, scale=0.1)
        # Left inverse of the pixel encoder, so decode(encode(x)) only loses
        # spatial detail, never color content.
        self.w_dec = torch.linalg.pinv(self.w_enc)

    # -- codec -----------------------------------------------------------

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.ascontiguousarray(pixels), dtype=torch.float64).permute(2, 0, 1)
        pooled = F.adaptive_avg_pool2d(x[None], self.latent_side)[0]          # 3 x L x L
        flat = pooled.reshape(3, -1).T                                        # L^2 x 3
        z = (flat @ self.w_enc.T + self.b_enc).T.reshape(self.latent_channels, self.latent_side, self.latent_side)
        return z.numpy()

    def decode(self, z: np.ndarray, out_hw: tuple[int, int] = (128, 128)) -> np.ndarray:
        zt = torch.as_tensor(z, dtype=torch.float64)
        flat = zt.reshape(self.latent_channels, -1).T
        rgb = ((flat - self.b_enc) @ self.w_dec.T).T.reshape(3, self.latent_side, self.latent_side)
        up = F.interpolate(rgb[None], size=out_hw, mode="bilinear", align_corners=False)[0]
        return up.clamp(0.0, 1.0).permute(1, 2, 0).numpy()

    # -- text ------------------------------------------------------------

    def tokenize(self, text: str) -> tuple[int, ...]:
        return tuple(stable_hash("tok", w) % self.config.vocab for w in self._words(text))

    @staticmethod
    def _words(text: str) -> list[str]:
        words = [w.strip(".,!?;:'\"()") for w in text.lower().split()]
        return [w for w in words if w]

    def build_prompt(self, template: str, class_name: str, anomaly_word: str) -> PromptSpec:
        """One token per word; the anomaly word's position(s) become j_set."""
        if "[cls]" not in template:
            raise ValidationError("prompt template must contain the [cls] placeholder")
        text = template.replace("[cls]", class_name)
        words = self._words(text)
        target = self._words(anomaly_word)
        if len(target) != 1:
            raise ValidationError(f"anomaly word must be a single word, got {anomaly_word!r}")
        idx = frozenset(i for i, w in enumerate(words) if w == target[0])
        if not idx:
            raise ValidationError(f"anomaly word {anomaly_word!r} does not occur in {text!r}")
        tokens = self.tokenize(text)
        if len(tokens) > self.token_limit:
            raise ValidationError(f"prompt has {len(tokens)} tokens, limit is {self.token_limit}")
        return PromptSpec(text=text, tokens=tokens,
                          anomaly_token_indices=idx, class_name=class_name)

    def text_encode(self, prompt: PromptSpec) -> np.ndarray:
        ids = torch.as_tensor(prompt.tokens, dtype=torch.long)
        return self.embed[ids].numpy()

    # -- denoiser --------------------------------------------------------

    def _check_prompt(self, prompt: PromptSpec):
        if prompt.n_tokens > self.token_limit:
            raise ValidationError(f"prompt has {prompt.n_tokens} tokens, limit is {self.token_limit}")

    def _attention_probs(self, z_t: torch.Tensor, t: int, prompt: PromptSpec) -> torch.Tensor:
        """softmax(Q K^T / sqrt(d)) at 16 x 16, differentiable in z_t."""
        side = self.ATTENTION_SIDE
        zu = F.interpolate(z_t[None], size=(side, side), mode="nearest")[0]
        feat = zu.reshape(self.latent_channels, side * side).T
        f = torch.tanh(feat @ self.w_phi.T + self.pos + (t / self.schedule.T) * self.w_time)
        q = f @ self.w_q.T
        ids = torch.as_tensor(prompt.tokens, dtype=torch.long)
        tau = self.embed[ids]
        k = tau @ self.w_k.T
        logits = q @ k.T / math.sqrt(self.config.d_attn)
        return torch.softmax(logits, dim=-1)

    def _predict_eps(self, z_t: torch.Tensor, t: int, prompt: PromptSpec, probs: torch.Tensor) -> torch.Tensor:
        side = self.ATTENTION_SIDE
        ids = torch.as_tensor(prompt.tokens, dtype=torch.long)
        v = self.embed[ids] @ self.w_v.T
        att = probs @ v
        o = (att @ self.w_out.T).T.reshape(self.latent_channels, side, side)
        o_lat = F.adaptive_avg_pool2d(o[None], self.latent_side)[0]
        h = torch.tanh(z_t + o_lat)
        flat = h.reshape(self.latent_channels, -1).T
        eps = (flat @ self.w_mix.T + self.b_mix).T.reshape(z_t.shape)
        return eps

    def attention_with_grad(self, z_t: torch.Tensor, t: int, prompt: PromptSpec) -> AttentionStack:
        self._check_prompt(prompt)
        side = self.ATTENTION_SIDE
        probs = self._attention_probs(z_t, t, prompt)
        amap = probs.reshape(side, side, prompt.n_tokens)
        return AttentionStack(maps=[amap], layer_ids=["toy.cross0"], t=t)

    def capture_attention(self, z: LatentState, prompt: PromptSpec) -> AttentionStack:
        with torch.no_grad():
            zt = torch.as_tensor(z.z, dtype=torch.float64)
            return self.attention_with_grad(zt, z.t, prompt)

    def denoise_step(self, z: LatentState, prompt: PromptSpec, capture: bool = False,
                     seed: int = 0) -> tuple[LatentState, AttentionStack | None]:
        self._check_prompt(prompt)
        if z.t < 1:
            raise ValidationError("denoise_step requires t >= 1")
        t = z.t
        sched = self.schedule
        with torch.no_grad():
            zt = torch.as_tensor(z.z, dtype=torch.float64)
            probs = self._attention_probs(zt, t, prompt)
            eps = self._predict_eps(zt, t, prompt, probs)

            beta_t = sched.betas[t - 1]
            ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
            alpha_t = 1.0 - beta_t
            mean = (zt - beta_t / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(alpha_t)
            var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
            if var > 0:
                zeta = np.random.default_rng(derive_seed(seed, "step-noise", t)).standard_normal(z.z.shape)
                mean = mean + math.sqrt(var) * torch.as_tensor(zeta)
            z_prev = mean.numpy()

        stack = None
        if capture:
            side = self.ATTENTION_SIDE
            amap = probs.reshape(side, side, prompt.n_tokens)
            stack = AttentionStack(maps=[amap], layer_ids=["toy.cross0"], t=t)
        return z.with_z(z_prev, t=t - 1), stack


def grad_wrt_latent(backbone: Backbone, z: LatentState, prompt: PromptSpec,
                    loss_fn: Callable[[AttentionStack], "torch.Tensor | float"]) -> np.ndarray:
    """Gradient of loss_fn(attention(z)) with respect to z.

    Loss functions that do not depend on the captured maps (constants)
    yield an all-zero gradient.
    """
    zt = torch.tensor(z.z, dtype=torch.float64, requires_grad=True)
    stack = backbone.attention_with_grad(zt, z.t, prompt)
    loss = loss_fn(stack)
    if not torch.is_tensor(loss) or not loss.requires_grad:
        return np.zeros_like(z.z)
    (g,) = torch.autograd.grad(loss, zt, allow_unused=True)
    if g is None:
        return np.zeros_like(z.z)
    return g.detach().numpy()
