"""Adapter that exposes a pretrained latent text-to-image diffusion model
through the Backbone contract: VAE encode/decode, tokenization with anomaly
word positions, classifier-free-guided denoise steps, and cross-attention
probability capture at 16x16 with a differentiable path back to the latent.

Requires the ``diffusers`` package and a user-supplied checkpoint id or
path; nothing in the test suite depends on it. The checkpoint cache
directory is taken from the CUT_CACHE_DIR environment variable.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule
from .types import AttentionStack, LatentState, PromptSpec, ValidationError, derive_seed


@dataclass(frozen=True)
class PretrainedBackboneConfig:
    model_id: str
    steps: int = 200
    guidance_scale: float = 7.5
    device: str = "cuda" if torch.cuda.is_available() else "cpu"
    capture_side: int = 16


class _ProbCapture:
    """Attention processor that stores pre-value softmax probability maps."""

    def __init__(self, store: list, layer_id: str, side: int):
        self.store = store
        self.layer_id = layer_id
        self.side = side

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
        residual = hidden_states
        is_cross = encoder_hidden_states is not None
        context = encoder_hidden_states if is_cross else hidden_states
        q = attn.to_q(hidden_states)
        k = attn.to_k(context)
        v = attn.to_v(context)
        q = attn.head_to_batch_dim(q)
        k = attn.head_to_batch_dim(k)
        v = attn.head_to_batch_dim(v)
        probs = attn.get_attention_scores(q, k, attention_mask)
        if is_cross and hidden_states.shape[1] == self.side ** 2:
            # mean over heads of the conditional half of the CFG batch
            heads = attn.heads
            p = probs.reshape(-1, heads, probs.shape[1], probs.shape[2])
            cond = p[-1].mean(dim=0)  # P^2 x N
            self.store.append((self.layer_id, cond.reshape(self.side, self.side, -1)))
        out = torch.bmm(probs, v)
        out = attn.batch_to_head_dim(out)
        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        if attn.residual_connection:
            out = out + residual
        return out


class PretrainedBackbone:
    """Backbone over a diffusers Stable-Diffusion-style pipeline."""

    def __init__(self, config: PretrainedBackboneConfig):
        try:
            from diffusers import StableDiffusionPipeline
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ValidationError(
                "the pretrained backbone requires the 'diffusers' package "
                "(pip install diffusers)") from exc
        self.config = config
        cache = os.environ.get("CUT_CACHE_DIR") or None
        pipe = StableDiffusionPipeline.from_pretrained(
            config.model_id, cache_dir=cache, safety_checker=None)
        pipe.to(config.device)
        self.pipe = pipe
        self.vae = pipe.vae
        self.unet = pipe.unet
        self.tokenizer = pipe.tokenizer
        self.text_encoder = pipe.text_encoder
        self.latent_channels = self.unet.config.in_channels
        self.latent_side = self.unet.config.sample_size
        self.token_limit = self.tokenizer.model_max_length
        self.schedule = self._build_schedule(config.steps)
        self._capture_store: list = []
        self._install_processors()

    def _build_schedule(self, steps: int) -> NoiseSchedule:
        sched = self.pipe.scheduler
        sched.set_timesteps(steps)
        ac = sched.alphas_cumprod.detach().cpu().numpy()
        # subsample the training schedule onto the inference grid
        idx = np.linspace(0, len(ac) - 1, steps).round().astype(int)
        alpha_bar = np.concatenate([[1.0], ac[idx]])
        betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
        return NoiseSchedule(T=steps, betas=betas, alpha_bar=alpha_bar)

    def _install_processors(self):
        procs = {}
        for name in self.unet.attn_processors:
            procs[name] = _ProbCapture(self._capture_store, name, self.config.capture_side)
        self.unet.set_attn_processor(procs)

    # -- codec ------------------------------------------------------------

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(pixels, dtype=torch.float32).permute(2, 0, 1)[None]
        x = (x * 2.0 - 1.0).to(self.config.device)
        with torch.no_grad():
            lat = self.vae.encode(x).latent_dist.mean * self.vae.config.scaling_factor
        return lat[0].double().cpu().numpy()

    def decode(self, z: np.ndarray, out_hw=None) -> np.ndarray:
        zt = torch.as_tensor(z, dtype=torch.float32)[None].to(self.config.device)
        with torch.no_grad():
            img = self.vae.decode(zt / self.vae.config.scaling_factor).sample[0]
        img = ((img + 1.0) / 2.0).clamp(0, 1).permute(1, 2, 0).cpu().double().numpy()
        if out_hw is not None and img.shape[:2] != tuple(out_hw):
            t = torch.as_tensor(img).permute(2, 0, 1)[None]
            img = torch.nn.functional.interpolate(
                t, size=tuple(out_hw), mode="bilinear", align_corners=False
            )[0].permute(1, 2, 0).numpy()
        return img

    # -- text ---------------------------------------------------------------

    def tokenize(self, text: str) -> tuple[int, ...]:
        return tuple(self.tokenizer(text, truncation=True).input_ids)

    def build_prompt(self, template: str, class_name: str, anomaly_word: str) -> PromptSpec:
        if "[cls]" not in template:
            raise ValidationError("prompt template must contain the [cls] placeholder")
        text = template.replace("[cls]", class_name)
        ids = self.tokenize(text)
        # subword positions of the anomaly word, via per-token decoding
        decoded = [self.tokenizer.decode([i]).strip().lower() for i in ids]
        word = anomaly_word.lower()
        idx = {i for i, tok in enumerate(decoded) if tok and (tok in word or word in tok)
               and tok not in ("<|startoftext|>", "<|endoftext|>")}
        if not idx:
            raise ValidationError(f"anomaly word {anomaly_word!r} not found among prompt tokens")
        return PromptSpec(text=text, tokens=ids, anomaly_token_indices=frozenset(idx),
                          class_name=class_name)

    def text_encode(self, prompt: PromptSpec) -> np.ndarray:
        ids = torch.tensor([list(prompt.tokens)], device=self.config.device)
        with torch.no_grad():
            emb = self.text_encoder(ids).last_hidden_state[0]
        return emb.cpu().numpy()

    def _embeddings(self, prompt: PromptSpec) -> tuple[torch.Tensor, torch.Tensor]:
        dev = self.config.device
        pad = self.tokenizer.pad_token_id or 0
        ids = list(prompt.tokens) + [pad] * (self.token_limit - len(prompt.tokens))
        uncond = self.tokenizer("", padding="max_length", max_length=self.token_limit).input_ids
        with torch.no_grad():
            cond = self.text_encoder(torch.tensor([ids], device=dev)).last_hidden_state
            unc = self.text_encoder(torch.tensor([uncond], device=dev)).last_hidden_state
        return unc, cond

    # -- denoiser -----------------------------------------------------------

    def _unet_eps(self, zt: torch.Tensor, t: int, prompt: PromptSpec) -> torch.Tensor:
        unc, cond = self._embeddings(prompt)
        latents = torch.cat([zt[None], zt[None]]).float()
        emb = torch.cat([unc, cond])
        self._capture_store.clear()
        t_tensor = torch.tensor(self._train_timestep(t), device=self.config.device)
        out = self.unet(latents, t_tensor, encoder_hidden_states=emb).sample
        e_unc, e_cond = out[0], out[1]
        return e_unc + self.config.guidance_scale * (e_cond - e_unc)

    def _train_timestep(self, t: int) -> int:
        n_train = self.pipe.scheduler.config.num_train_timesteps
        return int(round((t / self.schedule.T) * (n_train - 1)))

    def _collect_stack(self, t: int, n_tokens: int) -> AttentionStack:
        if not self._capture_store:
            raise ValidationError("no attention captured; processors not registered")
        maps = [m[:, :, :n_tokens] for _, m in self._capture_store]
        ids = [lid for lid, _ in self._capture_store]
        return AttentionStack(maps=maps, layer_ids=ids, t=t)

    def capture_attention(self, z: LatentState, prompt: PromptSpec) -> AttentionStack:
        with torch.no_grad():
            zt = torch.as_tensor(z.z, device=self.config.device)
            self._unet_eps(zt, z.t, prompt)
            stack = self._collect_stack(z.t, prompt.n_tokens)
        stack.maps = [m.detach().cpu() for m in stack.maps]
        return stack

    def attention_with_grad(self, z_t: torch.Tensor, t: int, prompt: PromptSpec) -> AttentionStack:
        self._unet_eps(z_t.to(self.config.device), t, prompt)
        return self._collect_stack(t, prompt.n_tokens)

    def denoise_step(self, z: LatentState, prompt: PromptSpec, capture: bool = False,
                     seed: int = 0) -> tuple[LatentState, AttentionStack | None]:
        if z.t < 1:
            raise ValidationError("denoise_step requires t >= 1")
        if prompt.n_tokens > self.token_limit:
            raise ValidationError(f"prompt has {prompt.n_tokens} tokens, limit is {self.token_limit}")
        sched = self.schedule
        t = z.t
        with torch.no_grad():
            zt = torch.as_tensor(z.z, device=self.config.device)
            eps = self._unet_eps(zt, t, prompt).double()
            stack = self._collect_stack(t, prompt.n_tokens) if capture else None
            beta_t = sched.betas[t - 1]
            ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
            mean = (zt.double() - beta_t / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(1.0 - beta_t)
            var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
            if var > 0:
                zeta = np.random.default_rng(derive_seed(seed, "step-noise", t)).standard_normal(z.z.shape)
                mean = mean + math.sqrt(var) * torch.as_tensor(zeta, device=mean.device)
            z_prev = mean.cpu().numpy()
        if stack is not None:
            stack.maps = [m.detach().cpu() for m in stack.maps]
        return z.with_z(z_prev, t=t - 1), stack
